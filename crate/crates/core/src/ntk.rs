//! Wide-network checks: the limiting kernels A and B, empirical NTK variance
//! decay, parameter drift, a grid solver for the limit ODE and finite-width
//! training compared against it.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::DomainKind;
use crate::error::{Error, Result};
use crate::field::{dot, DenseJet};
use crate::nn::{sigma, sigma_prime, CriticNet, InitSpec, ShallowNet};
use crate::optim::OptimizerKind;
use crate::pde::{actor_gradient_step, critic_gradient_step, generator, ntk_rate, TruncationFamily};
use crate::problems::ProblemSpec;
use crate::trainer::{init_networks, train_from, MetricsRecord, MetricsSink, OptimizerName, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelEstimate {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// σ(w·x+b)σ(w·y+b) + c²σ′(w·x+b)σ′(w·y+b)(x·y+1) for one neuron.
pub fn kernel_integrand(c: f64, w: &[f64], b: f64, x: &[f64], y: &[f64]) -> f64 {
    let ux = dot(w, x) + b;
    let uy = dot(w, y) + b;
    sigma(ux) * sigma(uy) + c * c * sigma_prime(ux) * sigma_prime(uy) * (dot(x, y) + 1.0)
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Draws M neurons (c, w, b) from `init`, flattened as [c, w_1..w_d, b].
pub fn sample_neurons<R: Rng + ?Sized>(init: &InitSpec, d: usize, m: usize, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(m * (d + 2));
    for _ in 0..m {
        out.push(init.sample_outer(rng));
        for _ in 0..d {
            out.push(init.sample_inner(rng));
        }
        out.push(init.sample_bias(rng));
    }
    out
}

/// Monte Carlo estimate of A(x, y) from M i.i.d. neurons.
pub fn kernel_a<R: Rng + ?Sized>(x: &[f64], y: &[f64], init: &InitSpec, m: usize, rng: &mut R) -> Result<KernelEstimate> {
    if m == 0 {
        return Err(Error::config("kernel estimate needs at least one sample"));
    }
    if x.len() != y.len() {
        return Err(Error::Dimension("kernel arguments differ in length".into()));
    }
    let d = x.len();
    let neurons = sample_neurons(init, d, m, rng);
    let vals: Vec<f64> = neurons
        .chunks_exact(d + 2)
        .map(|n| kernel_integrand(n[0], &n[1..=d], n[d + 1], x, y))
        .collect();
    let (mean, std_error) = mean_and_se(&vals);
    Ok(KernelEstimate {
        x: x.to_vec(),
        y: y.to_vec(),
        mean,
        std_error,
        samples: m,
    })
}

/// B(x, y) = η(x)η(y)A(x, y); exactly zero when either point is on ∂Ω.
pub fn kernel_b<R: Rng + ?Sized>(
    problem: &ProblemSpec,
    x: &[f64],
    y: &[f64],
    init: &InitSpec,
    m: usize,
    rng: &mut R,
) -> Result<KernelEstimate> {
    let ex = problem.domain.eta(x);
    let ey = problem.domain.eta(y);
    let mut est = kernel_a(x, y, init, m, rng)?;
    let s = ex * ey;
    est.mean *= s;
    est.std_error *= s.abs();
    Ok(est)
}

/// (1/N) Σ_i of the kernel integrand over the neurons of a scalar network.
pub fn empirical_ntk(net: &ShallowNet, x: &[f64], y: &[f64]) -> Result<f64> {
    if net.output_dim() != 1 {
        return Err(Error::Dimension("empirical NTK needs a scalar network".into()));
    }
    let n = net.width();
    let s: f64 = (0..n)
        .map(|i| kernel_integrand(net.outer()[i], net.inner_row(i), net.bias()[i], x, y))
        .sum();
    Ok(s / n as f64)
}

/// Per-neuron integrand values of a scalar network (for standard errors).
pub fn empirical_ntk_terms(net: &ShallowNet, x: &[f64], y: &[f64]) -> Vec<f64> {
    (0..net.width())
        .map(|i| kernel_integrand(net.outer()[i], net.inner_row(i), net.bias()[i], x, y))
        .collect()
}

/// Least-squares slope of log y against log x.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub width: usize,
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceStudy {
    pub rows: Vec<VarianceRow>,
    pub slope: f64,
}

/// Variance of the empirical NTK at (x, y) over `reps` initializations per width.
pub fn ntk_variance_study(widths: &[usize], reps: usize, x: &[f64], y: &[f64], beta: f64, seed: u64) -> Result<VarianceStudy> {
    if widths.len() < 2 || reps < 2 {
        return Err(Error::config("need at least two widths and two repetitions"));
    }
    let mut rows = Vec::new();
    for (wi, &n) in widths.iter().enumerate() {
        let vals: Vec<f64> = (0..reps)
            .into_par_iter()
            .map(|r| {
                let s = seed.wrapping_add(((wi as u64) << 32) | r as u64);
                let net = ShallowNet::init(n, x.len(), 1, beta, InitSpec::with_seed(s))?;
                empirical_ntk(&net, x, y)
            })
            .collect::<Result<_>>()?;
        let (mean, se) = mean_and_se(&vals);
        let variance = se * se * reps as f64;
        rows.push(VarianceRow { width: n, mean, variance });
    }
    let ws: Vec<f64> = rows.iter().map(|r| r.width as f64).collect();
    let vs: Vec<f64> = rows.iter().map(|r| r.variance).collect();
    Ok(VarianceStudy {
        slope: loglog_slope(&ws, &vs),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitErrorRow {
    pub width: usize,
    /// Root mean over seeds of ‖U_0^N‖²_{L²(μ)}.
    pub rms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitErrorStudy {
    pub rows: Vec<InitErrorRow>,
    pub slope: f64,
}

/// Size of the network output at initialization, which the limit starts at 0.
pub fn init_error_study(
    widths: &[usize],
    reps: usize,
    points: &[Vec<f64>],
    beta: f64,
    seed: u64,
) -> Result<InitErrorStudy> {
    let d = points.first().map_or(0, Vec::len);
    let mut rows = Vec::new();
    for (wi, &n) in widths.iter().enumerate() {
        let ms: Vec<f64> = (0..reps)
            .into_par_iter()
            .map(|r| {
                let s = seed.wrapping_add(((wi as u64) << 32) | r as u64);
                let net = ShallowNet::init(n, d, 1, beta, InitSpec::with_seed(s))?;
                Ok(points.iter().map(|x| net.forward_scalar(x).powi(2)).sum::<f64>() / points.len() as f64)
            })
            .collect::<Result<_>>()?;
        rows.push(InitErrorRow {
            width: n,
            rms: (ms.iter().sum::<f64>() / reps as f64).sqrt(),
        });
    }
    let ws: Vec<f64> = rows.iter().map(|r| r.width as f64).collect();
    let rs: Vec<f64> = rows.iter().map(|r| r.rms).collect();
    Ok(InitErrorStudy {
        slope: loglog_slope(&ws, &rs),
        rows,
    })
}

/// Max |θ_t − θ_0| over each parameter block of actor and critic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Drift {
    pub actor_outer: f64,
    pub actor_inner: f64,
    pub actor_bias: f64,
    pub critic_outer: f64,
    pub critic_inner: f64,
    pub critic_bias: f64,
}

impl Drift {
    pub fn between(a0: &ShallowNet, a1: &ShallowNet, c0: &ShallowNet, c1: &ShallowNet) -> Drift {
        let block = |n0: &ShallowNet, n1: &ShallowNet, k: usize| {
            let r = n0.block_ranges()[k].clone();
            n0.params()[r.clone()]
                .iter()
                .zip(&n1.params()[r])
                .map(|(p, q)| (p - q).abs())
                .fold(0.0, f64::max)
        };
        Drift {
            actor_outer: block(a0, a1, 0),
            actor_inner: block(a0, a1, 1),
            actor_bias: block(a0, a1, 2),
            critic_outer: block(c0, c1, 0),
            critic_inner: block(c0, c1, 1),
            critic_bias: block(c0, c1, 2),
        }
    }

    pub fn max(&self) -> f64 {
        [
            self.actor_outer,
            self.actor_inner,
            self.actor_bias,
            self.critic_outer,
            self.critic_inner,
            self.critic_bias,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftRow {
    pub width: usize,
    pub seed: u64,
    pub cycle: usize,
    pub drift: Drift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftStudy {
    pub rows: Vec<DriftRow>,
    /// Seed-averaged final max drift per width.
    pub final_by_width: Vec<(usize, f64)>,
    pub slope: f64,
}

struct DriftProbe {
    a0: ShallowNet,
    c0: ShallowNet,
    width: usize,
    seed: u64,
    rows: Vec<DriftRow>,
}

impl MetricsSink for DriftProbe {
    fn record(&mut self, _rec: &MetricsRecord) -> Result<()> {
        Ok(())
    }

    fn on_cycle_end(&mut self, cycle: usize, actor: &ShallowNet, critic: &CriticNet) -> Result<()> {
        self.rows.push(DriftRow {
            width: self.width,
            seed: self.seed,
            cycle,
            drift: Drift::between(&self.a0, actor, &self.c0, &critic.z),
        });
        Ok(())
    }
}

/// Trains with SGD and the N^{2β−1} rate factor at each width and records the
/// parameter drift after every cycle.
pub fn parameter_drift_study(problem: &ProblemSpec, base: &TrainConfig, widths: &[usize], seeds: &[u64]) -> Result<DriftStudy> {
    let mut rows = Vec::new();
    let mut final_by_width = Vec::new();
    for &n in widths {
        let mut acc = 0.0;
        for &seed in seeds {
            let cfg = TrainConfig {
                width_actor: n,
                width_critic: n,
                optimizer: OptimizerName::Sgd,
                include_ntk_rate_factor: true,
                seed,
                eval_points: 0,
                record_elapsed: false,
                ..base.clone()
            };
            let (a0, c0) = init_networks(problem, &cfg)?;
            let mut probe = DriftProbe {
                a0: a0.clone(),
                c0: c0.z.clone(),
                width: n,
                seed,
                rows: Vec::new(),
            };
            let out = train_from(problem, &cfg, a0, c0, &mut probe)?;
            if out.diverged() {
                return Err(Error::config(format!("drift run diverged at width {n}: {:?}", out.status)));
            }
            acc += probe.rows.last().map_or(0.0, |r| r.drift.max());
            rows.extend(probe.rows);
        }
        final_by_width.push((n, acc / seeds.len().max(1) as f64));
    }
    let ws: Vec<f64> = final_by_width.iter().map(|r| r.0 as f64).collect();
    let ds: Vec<f64> = final_by_width.iter().map(|r| r.1).collect();
    let slope = if ds.iter().all(|d| *d > 0.0) { loglog_slope(&ws, &ds) } else { f64::NAN };
    Ok(DriftStudy {
        rows,
        final_by_width,
        slope,
    })
}

/// Uniform tensor grid on [−R, R]^d (d ≤ 2) including boundary nodes. μ is
/// discretized by equal weights on all nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dim: usize,
    pub radius: f64,
    /// Intervals per axis; nodes per axis = intervals + 1.
    pub intervals: usize,
    pub h: f64,
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    /// Whether each node lies on ∂Ω.
    pub on_boundary: Vec<bool>,
}

impl Grid {
    pub fn new(problem: &ProblemSpec, intervals: usize) -> Result<Grid> {
        let dim = problem.dim();
        if !(dim == 1 || dim == 2) {
            return Err(Error::config("limit ODE grid supports d = 1 or d = 2 only"));
        }
        if dim == 2 && problem.domain.kind != DomainKind::Box {
            return Err(Error::config("two-dimensional limit ODE needs a box domain"));
        }
        if intervals < 4 {
            return Err(Error::config("grid needs at least 4 intervals"));
        }
        let r = problem.domain.radius;
        let h = 2.0 * r / intervals as f64;
        let axis: Vec<f64> = (0..=intervals).map(|j| -r + j as f64 * h).collect();
        let edge = |j: usize| j == 0 || j == intervals;
        let (nodes, on_boundary): (Vec<Vec<f64>>, Vec<bool>) = if dim == 1 {
            (0..=intervals).map(|i| (vec![axis[i]], edge(i))).unzip()
        } else {
            (0..=intervals)
                .flat_map(|i| (0..=intervals).map(move |j| (i, j)))
                .map(|(i, j)| (vec![axis[i], axis[j]], edge(i) || edge(j)))
                .unzip()
        };
        let n = nodes.len();
        Ok(Grid {
            dim,
            radius: r,
            intervals,
            h,
            nodes,
            weights: vec![1.0 / n as f64; n],
            on_boundary,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Derivative of order 1 or 2 along `axis`: central inside, second-order
    /// one-sided on the boundary.
    fn axis_derivative(&self, f: &[f64], axis: usize, order: usize) -> Vec<f64> {
        let p = self.intervals + 1;
        let n = self.intervals;
        let h = self.h;
        let stride = if self.dim == 2 && axis == 0 { p } else { 1 };
        (0..f.len())
            .map(|k| {
                let pos = if stride == 1 { k % p } else { k / p };
                let at = |m: usize| f[k - pos * stride + m * stride];
                match (order, pos) {
                    (1, 0) => (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h),
                    (1, i) if i == n => (3.0 * at(n) - 4.0 * at(n - 1) + at(n - 2)) / (2.0 * h),
                    (1, i) => (at(i + 1) - at(i - 1)) / (2.0 * h),
                    (_, 0) => (2.0 * at(0) - 5.0 * at(1) + 4.0 * at(2) - at(3)) / (h * h),
                    (_, i) if i == n => (2.0 * at(n) - 5.0 * at(n - 1) + 4.0 * at(n - 2) - at(n - 3)) / (h * h),
                    (_, i) => (at(i + 1) - 2.0 * at(i) + at(i - 1)) / (h * h),
                }
            })
            .collect()
    }

    /// Finite-difference jets of a grid function at every node.
    pub fn jets(&self, q: &[f64]) -> Vec<DenseJet> {
        let d = self.dim;
        let grads: Vec<Vec<f64>> = (0..d).map(|a| self.axis_derivative(q, a, 1)).collect();
        let seconds: Vec<Vec<f64>> = (0..d).map(|a| self.axis_derivative(q, a, 2)).collect();
        let mixed = (d == 2).then(|| self.axis_derivative(&grads[1], 0, 1));
        (0..q.len())
            .map(|k| {
                let mut jet = DenseJet::zeros(d);
                jet.value = q[k];
                for a in 0..d {
                    jet.grad[a] = grads[a][k];
                    jet.hess[a * d + a] = seconds[a][k];
                }
                if let Some(m) = &mixed {
                    jet.hess[1] = m[k];
                    jet.hess[2] = m[k];
                }
                jet
            })
            .collect()
    }

    /// L²(μ) norm of a grid function.
    pub fn norm(&self, f: &[f64]) -> f64 {
        f.iter().zip(&self.weights).map(|(v, w)| w * v * v).sum::<f64>().sqrt()
    }
}

/// Kernel matrix A on the grid from M neuron samples drawn with `init.seed`,
/// shared by all node pairs.
pub fn kernel_matrix(grid: &Grid, init: &InitSpec, m: usize) -> Vec<f64> {
    let n = grid.len();
    let d = grid.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
    let neurons = sample_neurons(init, d, m, &mut rng);
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|a| {
            let xa = &grid.nodes[a];
            let mut row = vec![0.0; n];
            for nu in neurons.chunks_exact(d + 2) {
                let (c, w, b) = (nu[0], &nu[1..=d], nu[d + 1]);
                let ua = dot(w, xa) + b;
                let (sa, ta) = (sigma(ua), c * c * sigma_prime(ua));
                for (r, xb) in row.iter_mut().zip(&grid.nodes) {
                    let ub = dot(w, xb) + b;
                    *r += sa * sigma(ub) + ta * sigma_prime(ub) * (dot(xa, xb) + 1.0);
                }
            }
            row.iter_mut().for_each(|v| *v /= m as f64);
            row
        })
        .collect();
    rows.concat()
}

/// Identifies a kernel matrix on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelKey {
    pub problem: String,
    pub dim: usize,
    pub radius: f64,
    pub intervals: usize,
    pub init: InitSpec,
    pub samples: usize,
}

impl KernelKey {
    pub fn file_name(&self) -> String {
        format!(
            "kernel_{}_d{}_n{}_s{}_m{}.json",
            self.problem, self.dim, self.intervals, self.init.seed, self.samples
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct KernelFile {
    key: KernelKey,
    values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitOdeConfig {
    pub intervals: usize,
    pub kernel_samples: usize,
    pub dt: f64,
    pub t_end: f64,
    /// Critic rate ω.
    pub omega: f64,
    /// Actor rate α.
    pub alpha: f64,
    /// Record a snapshot every this many steps (0: only start and end).
    pub record_every: usize,
    pub init: InitSpec,
}

impl Default for LimitOdeConfig {
    fn default() -> Self {
        LimitOdeConfig {
            intervals: 40,
            kernel_samples: 20_000,
            dt: 1e-3,
            t_end: 1.0,
            omega: 1.0,
            alpha: 1.0,
            record_every: 0,
            init: InitSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitOdeState {
    pub t: f64,
    pub q: Vec<f64>,
    pub u: Vec<f64>,
    /// L²(μ) norm of 𝓑 𝓛^U Q.
    pub critic_residual: f64,
    /// L²(μ) norm of 𝓐 ∂_u H.
    pub actor_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitOdeRun {
    pub grid: Grid,
    pub trajectory: Vec<LimitOdeState>,
    /// max |Q − ḡ| over boundary nodes and all steps.
    pub boundary_drift: f64,
}

impl LimitOdeRun {
    pub fn last(&self) -> &LimitOdeState {
        self.trajectory.last().expect("trajectory is never empty")
    }

    /// L²(μ) distance of the final Q to V on the grid.
    pub fn value_error(&self, problem: &ProblemSpec) -> Result<f64> {
        let v = &problem.solution()?.value;
        let e: Vec<f64> = self.grid.nodes.iter().zip(&self.last().q).map(|(x, q)| q - v.value(x)).collect();
        Ok(self.grid.norm(&e))
    }

    /// Finite-difference jets of the final Q.
    pub fn final_jets(&self) -> Vec<DenseJet> {
        self.grid.jets(&self.last().q)
    }
}

/// Pre-assembled kernel matrix and the right-hand side of the limit ODE.
pub struct LimitOde<'a> {
    pub problem: &'a ProblemSpec,
    pub grid: Grid,
    /// A on the grid, row-major.
    pub a: Vec<f64>,
    /// η at the grid nodes.
    pub eta: Vec<f64>,
}

impl<'a> LimitOde<'a> {
    pub fn new(problem: &'a ProblemSpec, intervals: usize, kernel_samples: usize, init: &InitSpec) -> Result<Self> {
        Self::with_cache(problem, intervals, kernel_samples, init, None)
    }

    /// Like `new`, reading and writing the kernel matrix under `cache_dir`.
    pub fn with_cache(
        problem: &'a ProblemSpec,
        intervals: usize,
        kernel_samples: usize,
        init: &InitSpec,
        cache_dir: Option<&Path>,
    ) -> Result<Self> {
        if problem.action_dim != 1 {
            return Err(Error::config("limit ODE grid solver supports scalar actions only"));
        }
        if kernel_samples == 0 {
            return Err(Error::config("kernel estimate needs at least one sample"));
        }
        let grid = Grid::new(problem, intervals)?;
        let key = KernelKey {
            problem: problem.name.clone(),
            dim: grid.dim,
            radius: grid.radius,
            intervals,
            init: *init,
            samples: kernel_samples,
        };
        let cached = cache_dir.map(|d| d.join(key.file_name())).and_then(|path| {
            let file: KernelFile = serde_json::from_slice(&std::fs::read(&path).ok()?).ok()?;
            (file.key == key && file.values.len() == grid.len() * grid.len()).then_some(file.values)
        });
        let a = match cached {
            Some(a) => a,
            None => {
                let a = kernel_matrix(&grid, init, kernel_samples);
                if let Some(dir) = cache_dir {
                    std::fs::create_dir_all(dir)?;
                    let file = KernelFile { key: key.clone(), values: a };
                    std::fs::write(dir.join(key.file_name()), serde_json::to_vec(&file)?)?;
                    file.values
                } else {
                    a
                }
            }
        };
        let eta = grid.nodes.iter().map(|x| problem.domain.eta(x)).collect();
        Ok(LimitOde { problem, grid, a, eta })
    }

    pub fn initial_state(&self) -> (Vec<f64>, Vec<f64>) {
        let q0 = self.grid.nodes.iter().map(|x| self.problem.boundary.value(x)).collect();
        (q0, vec![0.0; self.grid.len()])
    }

    /// Pointwise (𝓛^U Q, ∂_u H) on the grid.
    pub fn pointwise(&self, q: &[f64], u: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let jets = self.grid.jets(q);
        let mut l = vec![0.0; q.len()];
        let mut du = vec![0.0; q.len()];
        for (k, jet) in jets.iter().enumerate() {
            let mut a = [u[k]];
            self.problem.clamp_action(&mut a);
            let ev = generator(self.problem, jet, &self.grid.nodes[k], &a)?;
            l[k] = ev.value;
            du[k] = ev.du_hamiltonian[0];
        }
        Ok((l, du))
    }

    /// (𝓑 f)(x_a) = Σ_b w_b η_a η_b A_ab f_b
    pub fn apply_b(&self, f: &[f64]) -> Vec<f64> {
        let n = f.len();
        let g: Vec<f64> = (0..n).map(|b| self.grid.weights[b] * self.eta[b] * f[b]).collect();
        (0..n).map(|a| self.eta[a] * dot(&self.a[a * n..(a + 1) * n], &g)).collect()
    }

    /// (𝓐 f)(x_a) = Σ_b w_b A_ab f_b
    pub fn apply_a(&self, f: &[f64]) -> Vec<f64> {
        let n = f.len();
        let g: Vec<f64> = f.iter().zip(&self.grid.weights).map(|(v, w)| v * w).collect();
        (0..n).map(|a| dot(&self.a[a * n..(a + 1) * n], &g)).collect()
    }

    fn state(&self, t: f64, q: &[f64], u: &[f64]) -> Result<(LimitOdeState, Vec<f64>, Vec<f64>)> {
        let (l, du) = self.pointwise(q, u)?;
        let bl = self.apply_b(&l);
        let adu = self.apply_a(&du);
        Ok((
            LimitOdeState {
                t,
                q: q.to_vec(),
                u: u.to_vec(),
                critic_residual: self.grid.norm(&bl),
                actor_residual: self.grid.norm(&adu),
            },
            bl,
            adu,
        ))
    }

    /// Explicit Euler from (Q_0, U_0) = (ḡ, 0).
    pub fn integrate(&self, cfg: &LimitOdeConfig) -> Result<LimitOdeRun> {
        let (q0, u0) = self.initial_state();
        self.integrate_from(cfg, q0, u0)
    }

    pub fn integrate_from(&self, cfg: &LimitOdeConfig, mut q: Vec<f64>, mut u: Vec<f64>) -> Result<LimitOdeRun> {
        if !(cfg.dt > 0.0) || !(cfg.t_end >= 0.0) {
            return Err(Error::config("limit ODE needs dt > 0 and t_end ≥ 0"));
        }
        let steps = (cfg.t_end / cfg.dt).round() as usize;
        let scale0 = q.iter().chain(&u).fold(1.0f64, |m, v| m.max(v.abs()));
        let mut trajectory = Vec::new();
        let mut boundary_drift = 0.0f64;
        for s in 0..=steps {
            let t = s as f64 * cfg.dt;
            for (k, x) in self.grid.nodes.iter().enumerate() {
                if self.grid.on_boundary[k] {
                    boundary_drift = boundary_drift.max((q[k] - self.problem.boundary.value(x)).abs());
                }
            }
            let (state, bl, adu) = self.state(t, &q, &u)?;
            if s == 0 || s == steps || (cfg.record_every > 0 && s % cfg.record_every == 0) {
                trajectory.push(state);
            }
            if s == steps {
                break;
            }
            for k in 0..q.len() {
                q[k] += cfg.dt * cfg.omega * bl[k];
                u[k] -= cfg.dt * cfg.alpha * adu[k];
            }
            let big = q.iter().chain(&u).fold(0.0f64, |m, v| m.max(v.abs()));
            if !big.is_finite() || big > 1e6 * scale0 {
                return Err(Error::Unstable { t: t + cfg.dt });
            }
        }
        Ok(LimitOdeRun {
            grid: self.grid.clone(),
            trajectory,
            boundary_drift,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub width: usize,
    pub seed: u64,
    pub t: f64,
    /// L²(μ) distances to the limit-ODE state at time t.
    pub critic_l2: f64,
    pub actor_l2: f64,
    /// Grid ℋ²-type proxy for the critic distance: value, first and second
    /// finite differences in L²(μ). Not the Sobolev norm itself.
    pub critic_h2_proxy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyStudy {
    pub rows: Vec<ConsistencyRow>,
    /// Log-log slope of the t = 0 distance against width.
    pub t0_slope: f64,
}

impl ConsistencyStudy {
    /// Seed-averaged (critic² + actor²)^{1/2} per width at time t.
    pub fn distances_at(&self, t: f64) -> Vec<(usize, f64)> {
        let mut widths: Vec<usize> = self.rows.iter().map(|r| r.width).collect();
        widths.dedup();
        widths
            .into_iter()
            .map(|w| {
                let r: Vec<&ConsistencyRow> = self.rows.iter().filter(|r| r.width == w && r.t == t).collect();
                let ms = r.iter().map(|r| r.critic_l2.powi(2) + r.actor_l2.powi(2)).sum::<f64>() / r.len().max(1) as f64;
                (w, ms.sqrt())
            })
            .collect()
    }
}

/// Number of adjacent increases in a sequence.
pub fn inversions(values: &[f64]) -> usize {
    values.windows(2).filter(|w| w[1] > w[0]).count()
}

/// Trains finite networks by full-batch SGD on the grid nodes, critic and
/// actor updated simultaneously with learning rates ω·dt and α·dt and the rate
/// factor N^{2β−1}, and measures their distance to the limit ODE at `probe_times`.
pub fn width_consistency_study(
    ode: &LimitOde<'_>,
    cfg: &LimitOdeConfig,
    widths: &[usize],
    seeds: &[u64],
    beta: f64,
    probe_times: &[f64],
) -> Result<ConsistencyStudy> {
    let problem = ode.problem;
    let t_max = probe_times.iter().cloned().fold(0.0, f64::max);
    let limit = ode.integrate(&LimitOdeConfig {
        t_end: t_max,
        record_every: 1,
        ..cfg.clone()
    })?;
    let probe_steps: Vec<usize> = probe_times.iter().map(|t| (t / cfg.dt).round() as usize).collect();
    let grid = &ode.grid;
    let diff = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x - y).collect() };
    let h2 = |e: &[f64]| -> f64 {
        let s: f64 = grid
            .jets(e)
            .iter()
            .zip(&grid.weights)
            .map(|(j, w)| w * (j.value.powi(2) + j.grad.iter().map(|g| g * g).sum::<f64>() + j.hess.iter().map(|g| g * g).sum::<f64>()))
            .sum();
        s.sqrt()
    };
    let cells: Vec<(usize, u64)> = widths.iter().flat_map(|&w| seeds.iter().map(move |&s| (w, s))).collect();
    let results: Vec<Vec<ConsistencyRow>> = cells
        .par_iter()
        .map(|&(n, seed)| -> Result<Vec<ConsistencyRow>> {
            let tcfg = TrainConfig {
                width_actor: n,
                width_critic: n,
                beta,
                seed,
                ..TrainConfig::default()
            };
            let (mut actor, mut critic) = init_networks(problem, &tcfg)?;
            let fam = TruncationFamily::identity(n);
            let rate = ntk_rate(n, beta);
            let mut opt_c = OptimizerKind::Sgd.build(critic.z.num_params());
            let mut opt_a = OptimizerKind::Sgd.build(actor.num_params());
            let mut rows = Vec::new();
            let last = probe_steps.iter().copied().max().unwrap_or(0);
            for s in 0..=last {
                for (pi, _) in probe_steps.iter().enumerate().filter(|(_, &p)| p == s) {
                    let lim = &limit.trajectory[s];
                    let q: Vec<f64> = grid.nodes.iter().map(|x| critic.value(x)).collect();
                    let u: Vec<f64> = grid.nodes.iter().map(|x| actor.forward_scalar(x)).collect();
                    let eq = diff(&q, &lim.q);
                    rows.push(ConsistencyRow {
                        width: n,
                        seed,
                        t: probe_times[pi],
                        critic_l2: grid.norm(&eq),
                        actor_l2: grid.norm(&diff(&u, &lim.u)),
                        critic_h2_proxy: h2(&eq),
                    });
                }
                if s == last {
                    break;
                }
                let dc = critic_gradient_step(problem, &critic, &actor, &fam, &grid.nodes, rate)?;
                let da = actor_gradient_step(problem, &critic, &actor, &fam, &grid.nodes, None, rate)?;
                opt_c.apply(critic.z.params_mut(), &dc.delta, cfg.omega * cfg.dt);
                opt_a.apply(actor.params_mut(), &da.delta, cfg.alpha * cfg.dt);
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let mut study = ConsistencyStudy {
        rows: results.concat(),
        t0_slope: f64::NAN,
    };
    let t0 = study.distances_at(0.0);
    if t0.len() >= 2 && t0.iter().all(|p| p.1 > 0.0) {
        let ws: Vec<f64> = t0.iter().map(|p| p.0 as f64).collect();
        let ds: Vec<f64> = t0.iter().map(|p| p.1).collect();
        study.t0_slope = loglog_slope(&ws, &ds);
    }
    Ok(study)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{preset, Preset};

    #[test]
    fn kernel_symmetric_under_shared_samples() {
        let init = InitSpec::with_seed(0);
        let x = [0.3, -0.2];
        let y = [-0.5, 0.1];
        let a = kernel_a(&x, &y, &init, 5000, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = kernel_a(&y, &x, &init, 5000, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.mean, b.mean);
    }

    #[test]
    fn diagonal_kernel_is_nonnegative() {
        let init = InitSpec::with_seed(0);
        let a = kernel_a(&[0.4], &[0.4], &init, 2000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(a.mean + 3.0 * a.std_error >= 0.0);
    }

    #[test]
    fn kernel_b_vanishes_on_boundary() {
        let p = preset(Preset::Toy1d, None).unwrap();
        let init = InitSpec::with_seed(0);
        let b = kernel_b(&p, &[1.0], &[0.2], &init, 100, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(b.mean, 0.0);
    }

    #[test]
    fn width_one_ntk_by_hand() {
        let net = ShallowNet::from_parts(0.75, vec![0.5], vec![2.0], vec![-0.3], 1).unwrap();
        let (x, y) = (0.4f64, -0.1f64);
        let (ux, uy) = (2.0 * x - 0.3, 2.0 * y - 0.3);
        let t = |u: f64| u.tanh();
        let dt = |u: f64| 1.0 - u.tanh().powi(2);
        let hand = t(ux) * t(uy) + 0.25 * dt(ux) * dt(uy) * (x * y + 1.0);
        assert!((empirical_ntk(&net, &[x], &[y]).unwrap() - hand).abs() < 1e-15);
    }

    #[test]
    fn loglog_slope_recovers_power() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(-0.7)).collect();
        assert!((loglog_slope(&x, &y) + 0.7).abs() < 1e-12);
    }

    fn square(dim: usize) -> ProblemSpec {
        let mut p = preset(Preset::Toy1d, None).unwrap();
        p.domain = crate::domain::Domain::cube(1.0, dim).unwrap();
        p
    }

    #[test]
    fn one_d_stencils_exact_for_quadratics() {
        let grid = Grid::new(&square(1), 6).unwrap();
        let q: Vec<f64> = grid.nodes.iter().map(|x| 2.0 * x[0] * x[0] - x[0] + 0.5).collect();
        for (jet, x) in grid.jets(&q).iter().zip(&grid.nodes) {
            assert!((jet.grad[0] - (4.0 * x[0] - 1.0)).abs() < 1e-12);
            assert!((jet.hess[0] - 4.0).abs() < 1e-10);
        }
    }

    #[test]
    fn two_d_stencils_exact_for_quadratics() {
        let grid = Grid::new(&square(2), 8).unwrap();
        assert_eq!(grid.len(), 81);
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[0] * x[1] - x[1];
        let q: Vec<f64> = grid.nodes.iter().map(|x| f(x)).collect();
        for (jet, x) in grid.jets(&q).iter().zip(&grid.nodes) {
            assert!((jet.grad[0] - (2.0 * x[0] + 3.0 * x[1])).abs() < 1e-12);
            assert!((jet.grad[1] - (3.0 * x[0] - 1.0)).abs() < 1e-12);
            assert!((jet.hess[0] - 2.0).abs() < 1e-10);
            assert!((jet.hess[1] - 3.0).abs() < 1e-10 && (jet.hess[2] - 3.0).abs() < 1e-10);
            assert!(jet.hess[3].abs() < 1e-10);
        }
    }

    #[test]
    fn boundary_flags_and_weights() {
        let grid = Grid::new(&square(2), 4).unwrap();
        assert_eq!(grid.on_boundary.iter().filter(|b| **b).count(), 16);
        assert!((grid.weights.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn frozen_rates_keep_state_constant() {
        let p = preset(Preset::Toy1d, None).unwrap();
        let ode = LimitOde::new(&p, 10, 200, &InitSpec::with_seed(0)).unwrap();
        let cfg = LimitOdeConfig {
            omega: 0.0,
            alpha: 0.0,
            t_end: 0.1,
            dt: 0.01,
            ..LimitOdeConfig::default()
        };
        let run = ode.integrate(&cfg).unwrap();
        assert_eq!(run.trajectory.first().unwrap().q, run.last().q);
        assert_eq!(run.last().u, vec![0.0; 11]);
    }

    #[test]
    fn boundary_values_stay_put() {
        let p = preset(Preset::Toy1d, None).unwrap();
        let ode = LimitOde::new(&p, 16, 500, &InitSpec::with_seed(1)).unwrap();
        let cfg = LimitOdeConfig {
            t_end: 0.5,
            dt: 1e-2,
            ..LimitOdeConfig::default()
        };
        let run = ode.integrate(&cfg).unwrap();
        assert!(run.boundary_drift <= 1e-12);
        assert_ne!(run.trajectory[0].q, run.last().q);
    }

    #[test]
    fn huge_step_is_reported_unstable() {
        let p = preset(Preset::Toy1d, None).unwrap();
        let ode = LimitOde::new(&p, 16, 500, &InitSpec::with_seed(1)).unwrap();
        let cfg = LimitOdeConfig {
            t_end: 1e4,
            dt: 50.0,
            omega: 10.0,
            ..LimitOdeConfig::default()
        };
        assert!(matches!(ode.integrate(&cfg), Err(Error::Unstable { .. })));
    }

    #[test]
    fn kernel_cache_round_trip() {
        let p = preset(Preset::Toy1d, None).unwrap();
        let dir = std::env::temp_dir().join(format!("hjbac_kernel_{}", std::process::id()));
        let init = InitSpec::with_seed(3);
        let a = LimitOde::with_cache(&p, 8, 100, &init, Some(&dir)).unwrap();
        let b = LimitOde::with_cache(&p, 8, 100, &init, Some(&dir)).unwrap();
        assert_eq!(a.a, b.a);
        assert_eq!(a.a, LimitOde::new(&p, 8, 100, &init).unwrap().a);
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn zero_learning_rate_gives_zero_drift() {
        let p = crate::problems::problem1(2);
        let cfg = TrainConfig {
            base_lr_actor: 0.0,
            base_lr_critic: 0.0,
            critic_steps_per_cycle: 2,
            actor_steps_per_cycle: 2,
            m_critic: 16,
            m_actor: 16,
            total_cycles: 2,
            truncation: crate::pde::TruncationMode::Smooth,
            ..TrainConfig::default()
        };
        let study = parameter_drift_study(&p, &cfg, &[16, 32], &[0]).unwrap();
        assert!(study.rows.iter().all(|r| r.drift.max() == 0.0));
    }

    #[test]
    fn one_sgd_step_drift_is_step_size() {
        let p = crate::problems::problem1(2);
        let cfg = TrainConfig {
            width_actor: 32,
            width_critic: 32,
            ..TrainConfig::default()
        };
        let (a0, c0) = init_networks(&p, &cfg).unwrap();
        let batch = p.domain.sample_interior(64, &mut ChaCha8Rng::seed_from_u64(5));
        let fam = TruncationFamily::identity(32);
        let est = critic_gradient_step(&p, &c0, &a0, &fam, &batch, 1.0).unwrap();
        let lr = 0.01;
        let mut c1 = c0.clone();
        OptimizerKind::Sgd.build(0).apply(c1.z.params_mut(), &est.delta, lr);
        let d = Drift::between(&a0, &a0, &c0.z, &c1.z);
        let r = c0.z.block_ranges();
        let p0 = c0.z.params();
        let expect = |k: usize| r[k].clone().map(|i| (p0[i] - (p0[i] - lr * est.delta[i])).abs()).fold(0.0, f64::max);
        assert_eq!(d.critic_outer, expect(0));
        assert_eq!(d.critic_inner, expect(1));
        assert_eq!(d.critic_bias, expect(2));
        assert_eq!(d.actor_outer + d.actor_inner + d.actor_bias, 0.0);
    }

    #[test]
    fn inversion_count() {
        assert_eq!(inversions(&[3.0, 2.0, 2.5, 1.0]), 1);
        assert_eq!(inversions(&[1.0]), 0);
    }
}
