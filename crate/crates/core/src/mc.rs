//! Euler–Maruyama estimation of the cost of a feedback control, and the
//! agreement metrics between analytic value, critic and simulated cost.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pde::{Policy, ValueModel};
use crate::problems::ProblemSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McConfig {
    pub dt: f64,
    pub paths_per_point: usize,
    pub eval_points: usize,
    /// Horizon after which a path is stopped and valued with ḡ.
    pub max_time: f64,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            dt: 1e-3,
            paths_per_point: 2000,
            eval_points: 1000,
            max_time: 200.0,
            seed: 0,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("dt must be positive"));
        }
        if !(self.max_time > 0.0) {
            return Err(Error::config("max_time must be positive"));
        }
        if self.paths_per_point == 0 || self.eval_points == 0 {
            return Err(Error::config("paths and points must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEstimate {
    pub x: Vec<f64>,
    pub mean: f64,
    /// Standard error of the mean; `None` with fewer than two paths.
    pub std_error: Option<f64>,
    pub mean_exit_time: f64,
    pub censored_fraction: f64,
}

/// Outcome of a single simulated path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathOutcome {
    pub cost: f64,
    pub exit_time: f64,
    pub censored: bool,
}

/// Independent stream for path `path` started from point `point`.
pub fn path_rng(seed: u64, point: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(point.wrapping_mul(1 << 32).wrapping_add(path));
    rng
}

/// Simulates one path of dX = b dt + Φ dW under `policy` until it leaves Ω.
pub fn simulate_path<R: Rng + ?Sized>(
    problem: &ProblemSpec,
    policy: &dyn Policy,
    x0: &[f64],
    cfg: &McConfig,
    rng: &mut R,
) -> Result<PathOutcome> {
    let d = problem.dim();
    let gamma = problem.gamma;
    let dt = cfg.dt;
    let sq = dt.sqrt();
    let mut x = x0.to_vec();
    let mut next = vec![0.0; d];
    let mut b = vec![0.0; d];
    let mut noise = vec![0.0; d];
    let mut raw = vec![0.0; problem.action_dim];
    let mut xi = vec![0.0; problem.noise_dim];
    let mut t = 0.0;
    let mut acc = 0.0;
    let mut n = 0u64;
    let max_steps = (cfg.max_time / dt - 1e-9).ceil().max(1.0) as u64;
    loop {
        if n >= max_steps {
            acc += (-gamma * t).exp() * problem.boundary.value(&x);
            return Ok(PathOutcome {
                cost: acc,
                exit_time: t,
                censored: true,
            });
        }
        policy.act_raw(&x, &mut raw);
        problem.clamp_action(&mut raw);
        let a = &raw;
        let c = problem.running_cost(&x, a);
        problem.dynamics.drift(&x, a, &mut b);
        let phi = problem.diffusion(&x, a);
        for v in xi.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        phi.apply(&xi, &mut noise);
        for j in 0..d {
            next[j] = x[j] + b[j] * dt + sq * noise[j];
        }
        if !c.is_finite() || next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "simulated path",
                x: x.clone(),
            });
        }
        let disc = (-gamma * t).exp();
        if problem.domain.contains(&next) {
            acc += disc * c * dt;
            std::mem::swap(&mut x, &mut next);
            n += 1;
            t = n as f64 * dt;
        } else {
            let (theta, exit) = problem.domain.segment_exit(&x, &next);
            let tau = t + theta * dt;
            acc += disc * c * theta * dt;
            acc += (-gamma * tau).exp() * problem.boundary.value(&exit);
            return Ok(PathOutcome {
                cost: acc,
                exit_time: tau,
                censored: false,
            });
        }
    }
}

/// Monte Carlo estimate of V^u(x) from `cfg.paths_per_point` paths. Path p of
/// point `point` uses its own stream, so the result does not depend on threading.
pub fn simulate_value(
    problem: &ProblemSpec,
    policy: &dyn Policy,
    x: &[f64],
    cfg: &McConfig,
    point: u64,
) -> Result<PathEstimate> {
    cfg.validate()?;
    if x.len() != problem.dim() {
        return Err(Error::Dimension(format!("start point has length {}, problem dimension {}", x.len(), problem.dim())));
    }
    let outcomes: Vec<PathOutcome> = (0..cfg.paths_per_point as u64)
        .into_par_iter()
        .map(|p| simulate_path(problem, policy, x, cfg, &mut path_rng(cfg.seed, point, p)))
        .collect::<Result<_>>()?;
    Ok(summarize(x, &outcomes))
}

fn summarize(x: &[f64], outcomes: &[PathOutcome]) -> PathEstimate {
    let n = outcomes.len() as f64;
    let mean = outcomes.iter().map(|o| o.cost).sum::<f64>() / n;
    let std_error = (outcomes.len() > 1).then(|| {
        let var = outcomes.iter().map(|o| (o.cost - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    });
    PathEstimate {
        x: x.to_vec(),
        mean,
        std_error,
        mean_exit_time: outcomes.iter().map(|o| o.exit_time).sum::<f64>() / n,
        censored_fraction: outcomes.iter().filter(|o| o.censored).count() as f64 / n,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRow {
    pub x: Vec<f64>,
    pub v: Option<f64>,
    pub q: f64,
    pub v_mc: f64,
    pub std_error: Option<f64>,
    pub exit_mean: f64,
    pub censored_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub left: f64,
    pub right: f64,
    pub count: usize,
}

pub const HISTOGRAM_BINS: usize = 50;

/// Equal-width histogram over the observed range of `values`.
pub fn histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            left: lo + i as f64 * width,
            right: if i + 1 == bins { hi } else { lo + (i + 1) as f64 * width },
            count: 0,
        })
        .collect();
    for v in values {
        let i = (((v - lo) / width) as usize).min(bins - 1);
        out[i].count += 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    /// mean (V − V^u_MC)²
    pub e1: Option<f64>,
    /// mean (V − Q)²
    pub e2: Option<f64>,
    /// mean (Q − V^u_MC)²
    pub e3: f64,
    pub rows: Vec<AgreementRow>,
    pub hist_true_mc: Vec<HistogramBin>,
    pub hist_true_critic: Vec<HistogramBin>,
    pub hist_critic_mc: Vec<HistogramBin>,
}

/// Samples `cfg.eval_points` points from μ and compares V, Q and V^u_MC there.
pub fn agreement_report(
    problem: &ProblemSpec,
    actor: &dyn Policy,
    critic: &dyn ValueModel,
    cfg: &McConfig,
) -> Result<AgreementReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pts = problem.domain.sample_interior(cfg.eval_points, &mut rng);
    agreement_report_at(problem, actor, critic, cfg, &pts)
}

pub fn agreement_report_at(
    problem: &ProblemSpec,
    actor: &dyn Policy,
    critic: &dyn ValueModel,
    cfg: &McConfig,
    pts: &[Vec<f64>],
) -> Result<AgreementReport> {
    let value = problem.analytic.as_ref().map(|s| s.value.clone());
    let mut rows = Vec::with_capacity(pts.len());
    for (i, x) in pts.iter().enumerate() {
        let est = simulate_value(problem, actor, x, cfg, i as u64)?;
        rows.push(AgreementRow {
            x: x.clone(),
            v: value.as_ref().map(|v| v.value(x)),
            q: critic.jet_at(x).value(),
            v_mc: est.mean,
            std_error: est.std_error,
            exit_mean: est.mean_exit_time,
            censored_fraction: est.censored_fraction,
        });
    }
    let n = rows.len() as f64;
    let d_true_mc: Option<Vec<f64>> = rows.iter().map(|r| r.v.map(|v| v - r.v_mc)).collect();
    let d_true_critic: Option<Vec<f64>> = rows.iter().map(|r| r.v.map(|v| v - r.q)).collect();
    let d_critic_mc: Vec<f64> = rows.iter().map(|r| r.q - r.v_mc).collect();
    let msq = |v: &[f64]| v.iter().map(|d| d * d).sum::<f64>() / n;
    Ok(AgreementReport {
        e1: d_true_mc.as_deref().map(msq),
        e2: d_true_critic.as_deref().map(msq),
        e3: msq(&d_critic_mc),
        hist_true_mc: d_true_mc.as_deref().map_or_else(Vec::new, |v| histogram(v, HISTOGRAM_BINS)),
        hist_true_critic: d_true_critic.as_deref().map_or_else(Vec::new, |v| histogram(v, HISTOGRAM_BINS)),
        hist_critic_mc: histogram(&d_critic_mc, HISTOGRAM_BINS),
        rows,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

impl AgreementReport {
    pub fn write_points_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "x,V,Q,V_mc,stderr,exit_mean,censored_frac")?;
        for r in &self.rows {
            let x: Vec<String> = r.x.iter().map(|v| v.to_string()).collect();
            writeln!(
                out,
                "\"{}\",{},{},{},{},{},{}",
                x.join(" "),
                opt(r.v),
                r.q,
                r.v_mc,
                opt(r.std_error),
                r.exit_mean,
                r.censored_fraction
            )?;
        }
        Ok(())
    }
}

pub fn write_histogram_csv<W: Write>(bins: &[HistogramBin], mut out: W) -> Result<()> {
    writeln!(out, "bin_left,bin_right,count")?;
    for b in bins {
        writeln!(out, "{},{},{}", b.left, b.right, b.count)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Domain;
    use crate::field::Constant;
    use crate::pde::AnalyticPolicy;
    use crate::problems::{Diffusion, Dynamics};
    use std::sync::Arc;

    /// b ≡ 0, Φ ≡ √2, c ≡ 1 on (−1, 1), γ = 0, g ≡ 0, so V(x) = (1 − x²)/2.
    pub(crate) fn poisson_1d() -> ProblemSpec {
        struct Poisson;
        impl Dynamics for Poisson {
            fn drift(&self, _x: &[f64], _a: &[f64], out: &mut [f64]) {
                out[0] = 0.0;
            }
            fn diffusion(&self, _x: &[f64], _a: &[f64]) -> Diffusion {
                Diffusion::Diagonal(vec![std::f64::consts::SQRT_2])
            }
            fn running_cost(&self, _x: &[f64], _a: &[f64]) -> f64 {
                1.0
            }
        }
        ProblemSpec {
            name: "poisson_1d".into(),
            domain: Domain::ball(1.0, 1).unwrap(),
            action_dim: 1,
            noise_dim: 1,
            gamma: 0.0,
            dynamics: Arc::new(Poisson),
            boundary: Arc::new(Constant { dim: 1, value: 0.0 }),
            action_clamp: None,
            analytic: None,
            zeta: None,
        }
    }

    fn zero_policy() -> AnalyticPolicy {
        AnalyticPolicy {
            control: Arc::new(|_x: &[f64], out: &mut [f64]| out.iter_mut().for_each(|v| *v = 0.0)),
            action_dim: 1,
        }
    }

    #[test]
    fn strong_discount_kills_the_terminal_term() {
        let mut p = poisson_1d();
        struct NoCost;
        impl Dynamics for NoCost {
            fn drift(&self, _x: &[f64], _a: &[f64], out: &mut [f64]) {
                out[0] = 0.0;
            }
            fn diffusion(&self, _x: &[f64], _a: &[f64]) -> Diffusion {
                Diffusion::Diagonal(vec![1.0])
            }
            fn running_cost(&self, _x: &[f64], _a: &[f64]) -> f64 {
                0.0
            }
        }
        p.dynamics = Arc::new(NoCost);
        p.gamma = 1e3;
        p.boundary = Arc::new(Constant { dim: 1, value: 1.0 });
        let cfg = McConfig {
            paths_per_point: 200,
            ..McConfig::default()
        };
        let est = simulate_value(&p, &zero_policy(), &[0.0], &cfg, 0).unwrap();
        assert!(est.mean < 1e-10, "{}", est.mean);
    }

    #[test]
    fn poisson_oracle_at_origin() {
        let p = poisson_1d();
        let cfg = McConfig {
            dt: 1e-4,
            paths_per_point: 1000,
            ..McConfig::default()
        };
        let est = simulate_value(&p, &zero_policy(), &[0.0], &cfg, 0).unwrap();
        let se = est.std_error.unwrap();
        assert!((est.mean - 0.5).abs() < 3.0 * se + 0.58 * 2f64.sqrt() * cfg.dt.sqrt());
        assert_eq!(est.censored_fraction, 0.0);
    }

    #[test]
    fn single_path_has_no_std_error() {
        let cfg = McConfig {
            paths_per_point: 1,
            ..McConfig::default()
        };
        let est = simulate_value(&poisson_1d(), &zero_policy(), &[0.2], &cfg, 0).unwrap();
        assert!(est.std_error.is_none());
    }

    #[test]
    fn horizon_cap_censors() {
        let cfg = McConfig {
            max_time: 0.01,
            paths_per_point: 20,
            ..McConfig::default()
        };
        let est = simulate_value(&poisson_1d(), &zero_policy(), &[0.0], &cfg, 0).unwrap();
        assert_eq!(est.censored_fraction, 1.0);
        assert!((est.mean - 0.01).abs() < 1e-9);
    }

    #[test]
    fn histogram_counts_everything() {
        let v: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let h = histogram(&v, 50);
        assert_eq!(h.len(), 50);
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), 1000);
        assert_eq!(h[0].left, v.iter().cloned().fold(f64::INFINITY, f64::min));
    }
}
