//! Generator evaluation, smooth truncation and the clipped Monte Carlo
//! gradient estimators for the critic and the actor.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{dot, DenseJet, Jet, SharedField};
use crate::nn::{CriticNet, ShallowNet};
use crate::problems::{ControlFn, Diffusion, ProblemSpec};

/// Step of the central differences in the action variable.
pub const ACTION_FD_STEP: f64 = 1e-5;

/// Points per reduction chunk. Fixed so results do not depend on the thread count.
pub const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationMode {
    Smooth,
    Identity,
}

/// Smooth clipping ψ^N with ψ^N(x) = x on [−N^δ, N^δ] and Gaussian-tailed
/// derivative outside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationFamily {
    pub delta: f64,
    pub width: usize,
    pub mode: TruncationMode,
}

impl TruncationFamily {
    pub fn smooth(width: usize, delta: f64) -> Self {
        TruncationFamily {
            delta,
            width,
            mode: TruncationMode::Smooth,
        }
    }

    pub fn identity(width: usize) -> Self {
        TruncationFamily {
            delta: 0.0,
            width,
            mode: TruncationMode::Identity,
        }
    }

    pub fn default_delta(beta: f64) -> f64 {
        (1.0 - beta) / 5.0
    }

    /// Checks δ ∈ (0, (1−β)/4) for smooth mode.
    pub fn validate(&self, beta: f64) -> Result<()> {
        if self.width == 0 {
            return Err(Error::config("truncation width must be positive"));
        }
        if self.mode == TruncationMode::Smooth && !(self.delta > 0.0 && self.delta < (1.0 - beta) / 4.0) {
            return Err(Error::config(format!(
                "truncation delta must lie in (0, {}), got {}",
                (1.0 - beta) / 4.0,
                self.delta
            )));
        }
        Ok(())
    }

    /// N^δ, the half-width of the identity window.
    pub fn threshold(&self) -> f64 {
        match self.mode {
            TruncationMode::Smooth => (self.width as f64).powf(self.delta),
            TruncationMode::Identity => f64::INFINITY,
        }
    }

    /// (ψ(x), ψ′(x), F(x) = ψ(x)ψ′(x))
    pub fn eval(&self, x: f64) -> (f64, f64, f64) {
        if self.mode == TruncationMode::Identity {
            return (x, 1.0, x);
        }
        let m = self.threshold();
        let a = x.abs();
        if a <= m {
            return (x, 1.0, x);
        }
        let t = a - m;
        let psi = (m + 0.5 * std::f64::consts::PI.sqrt() * libm::erf(t)).copysign(x);
        let dpsi = (-t * t).exp();
        (psi, dpsi, psi * dpsi)
    }

    pub fn psi(&self, x: f64) -> f64 {
        self.eval(x).0
    }

    pub fn big_f(&self, x: f64) -> f64 {
        self.eval(x).2
    }
}

/// L^u Q(x), H(u,Q)(x) and ∂_u H at one state/action pair.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorEval {
    pub value: f64,
    pub hamiltonian: f64,
    pub du_hamiltonian: Vec<f64>,
}

/// Anything the generator can be applied to.
pub trait ValueModel: Sync {
    fn dim(&self) -> usize;

    fn jet_at<'a>(&'a self, x: &[f64]) -> Box<dyn Jet + 'a>;

    fn num_params(&self) -> usize;

    /// Adds weight · ∇_φ(−Q(x)).
    fn accumulate_neg_value_gradient(&self, x: &[f64], weight: f64, out: &mut [f64]);

    /// Builds the jet at x, obtains a weight from it and adds weight · ∇_φ(−Q(x)).
    fn accumulate_weighted(
        &self,
        x: &[f64],
        weight: &mut dyn FnMut(&dyn Jet) -> Result<f64>,
        out: &mut [f64],
    ) -> Result<()> {
        let w = weight(self.jet_at(x).as_ref())?;
        self.accumulate_neg_value_gradient(x, w, out);
        Ok(())
    }
}

impl ValueModel for CriticNet {
    fn dim(&self) -> usize {
        self.z.input_dim()
    }

    fn jet_at<'a>(&'a self, x: &[f64]) -> Box<dyn Jet + 'a> {
        Box::new(self.jet(x))
    }

    fn num_params(&self) -> usize {
        self.z.num_params()
    }

    fn accumulate_neg_value_gradient(&self, x: &[f64], weight: f64, out: &mut [f64]) {
        CriticNet::accumulate_neg_value_gradient(self, x, weight, out)
    }

    fn accumulate_weighted(
        &self,
        x: &[f64],
        weight: &mut dyn FnMut(&dyn Jet) -> Result<f64>,
        out: &mut [f64],
    ) -> Result<()> {
        let jet = self.jet(x);
        let w = weight(&jet)?;
        self.accumulate_neg_value_gradient_from(&jet, x, w, out);
        Ok(())
    }
}

/// A fixed analytic value function with no trainable parameters.
#[derive(Clone)]
pub struct AnalyticValue(pub SharedField);

impl ValueModel for AnalyticValue {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn jet_at<'a>(&'a self, x: &[f64]) -> Box<dyn Jet + 'a> {
        Box::new(self.0.jet(x))
    }

    fn num_params(&self) -> usize {
        0
    }

    fn accumulate_neg_value_gradient(&self, _x: &[f64], _weight: f64, _out: &mut [f64]) {}
}

/// A feedback control, raw (before any action clamp).
pub trait Policy: Sync {
    fn action_dim(&self) -> usize;

    fn act_raw(&self, x: &[f64], out: &mut [f64]);

    fn num_params(&self) -> usize;

    /// Adds Σ_l weight_l ∇_θ U_l(x).
    fn accumulate_gradient(&self, x: &[f64], weight: &[f64], out: &mut [f64]);

    /// `act_raw` that may leave intermediate results in `cache`.
    fn act_raw_cached(&self, x: &[f64], out: &mut [f64], _cache: &mut Vec<f64>) {
        self.act_raw(x, out)
    }

    /// `accumulate_gradient` reusing the cache filled by `act_raw_cached` at the same x.
    fn accumulate_gradient_cached(&self, x: &[f64], _cache: &[f64], weight: &[f64], out: &mut [f64]) {
        self.accumulate_gradient(x, weight, out)
    }
}

impl Policy for ShallowNet {
    fn action_dim(&self) -> usize {
        self.output_dim()
    }

    fn act_raw(&self, x: &[f64], out: &mut [f64]) {
        self.forward_into(x, out)
    }

    fn num_params(&self) -> usize {
        ShallowNet::num_params(self)
    }

    fn accumulate_gradient(&self, x: &[f64], weight: &[f64], out: &mut [f64]) {
        self.accumulate_output_gradient(x, weight, out)
    }

    fn act_raw_cached(&self, x: &[f64], out: &mut [f64], cache: &mut Vec<f64>) {
        *cache = self.hidden(x);
        let n = self.width();
        let s = self.scale();
        for (l, o) in out.iter_mut().enumerate() {
            *o = s * dot(&self.outer()[l * n..(l + 1) * n], cache);
        }
    }

    fn accumulate_gradient_cached(&self, x: &[f64], cache: &[f64], weight: &[f64], out: &mut [f64]) {
        self.accumulate_output_gradient_with(x, cache, weight, out)
    }
}

#[derive(Clone)]
pub struct AnalyticPolicy {
    pub control: ControlFn,
    pub action_dim: usize,
}

impl Policy for AnalyticPolicy {
    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn act_raw(&self, x: &[f64], out: &mut [f64]) {
        (self.control)(x, out)
    }

    fn num_params(&self) -> usize {
        0
    }

    fn accumulate_gradient(&self, _x: &[f64], _weight: &[f64], _out: &mut [f64]) {}
}

impl AnalyticPolicy {
    pub fn optimal(problem: &ProblemSpec) -> Result<Self> {
        Ok(AnalyticPolicy {
            control: problem.solution()?.control.clone(),
            action_dim: problem.action_dim,
        })
    }
}

fn check_finite(what: &'static str, v: f64, x: &[f64]) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { what, x: x.to_vec() })
    }
}

/// b·∇Q + ½ Tr(ΦΦᵀ Hess Q) + c at action `a`, with Q's jet fixed.
fn hamiltonian_at(problem: &ProblemSpec, jet: &dyn Jet, hess_diag: &mut Option<Vec<f64>>, x: &[f64], a: &[f64]) -> f64 {
    let d = x.len();
    let mut b = vec![0.0; d];
    problem.dynamics.drift(x, a, &mut b);
    let phi = problem.dynamics.diffusion(x, a);
    let transport_diffusion = match &phi {
        // Each diagonal column is φ_j e_j, so its directional term only needs H_jj.
        Diffusion::Diagonal(s) => {
            let h = hess_diag.get_or_insert_with(|| jet.hess_diag());
            dot(&b, jet.grad()) + 0.5 * s.iter().zip(h.iter()).map(|(sj, hj)| sj * sj * hj).sum::<f64>()
        }
        Diffusion::Columns(cols) => {
            let m = cols.len() as f64;
            let shift: Vec<f64> = b.iter().map(|v| v / (2.0 * m)).collect();
            let mut acc = 0.0;
            for col in cols {
                let p: Vec<f64> = col.iter().map(|v| v * std::f64::consts::FRAC_1_SQRT_2).collect();
                acc += jet.dir2(&p, &shift);
            }
            acc
        }
    };
    transport_diffusion + problem.dynamics.running_cost(x, a)
}

/// Evaluates L^a Q(x) = b·∇Q + ½Tr(ΦΦᵀ Hess Q) + c − γQ by summing directional
/// second derivatives over the columns of Φ, plus ∂_a H by central differences.
pub fn generator(problem: &ProblemSpec, jet: &dyn Jet, x: &[f64], a: &[f64]) -> Result<GeneratorEval> {
    let mut hess_diag = None;
    let ham = check_finite("hamiltonian", hamiltonian_at(problem, jet, &mut hess_diag, x, a), x)?;
    let q = jet.value();
    let mut du = vec![0.0; a.len()];
    let mut ap = a.to_vec();
    for l in 0..a.len() {
        let h = ACTION_FD_STEP * a[l].abs().max(1.0);
        ap[l] = a[l] + h;
        let hp = hamiltonian_at(problem, jet, &mut hess_diag, x, &ap);
        ap[l] = a[l] - h;
        let hm = hamiltonian_at(problem, jet, &mut hess_diag, x, &ap);
        ap[l] = a[l];
        du[l] = check_finite("action derivative of the hamiltonian", (hp - hm) / (2.0 * h), x)?;
    }
    Ok(GeneratorEval {
        value: ham - problem.gamma * q,
        hamiltonian: ham,
        du_hamiltonian: du,
    })
}

/// (L^a Q(x), H(a, Q)(x)) without the action derivative.
pub fn generator_value(problem: &ProblemSpec, jet: &dyn Jet, x: &[f64], a: &[f64]) -> Result<(f64, f64)> {
    let ham = check_finite("hamiltonian", hamiltonian_at(problem, jet, &mut None, x, a), x)?;
    Ok((ham - problem.gamma * jet.value(), ham))
}

/// L^a Q(x) assembled from the dense Hessian entry by entry. Reference only.
pub fn generator_value_dense(problem: &ProblemSpec, jet: &dyn Jet, x: &[f64], a: &[f64]) -> f64 {
    let b = problem.drift(x, a);
    let cov = problem.diffusion(x, a).covariance();
    let hess = jet.hessian();
    let tr: f64 = cov.iter().zip(&hess).map(|(c, h)| c * h).sum();
    dot(&b, jet.grad()) + 0.5 * tr + problem.running_cost(x, a) - problem.gamma * jet.value()
}

/// Generator of an analytic field, for plug-in checks.
pub fn generator_for_field(problem: &ProblemSpec, field: &SharedField, x: &[f64], a: &[f64]) -> Result<GeneratorEval> {
    let jet: DenseJet = field.jet(x);
    generator(problem, &jet, x, a)
}

/// Action actually applied at x: the clamped policy output, and the raw output.
pub fn applied_action(problem: &ProblemSpec, policy: &dyn Policy, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut raw = vec![0.0; policy.action_dim()];
    policy.act_raw(x, &mut raw);
    let mut a = raw.clone();
    problem.clamp_action(&mut a);
    (a, raw)
}

fn applied_action_cached(problem: &ProblemSpec, policy: &dyn Policy, x: &[f64], cache: &mut Vec<f64>) -> (Vec<f64>, Vec<f64>) {
    let mut raw = vec![0.0; policy.action_dim()];
    policy.act_raw_cached(x, &mut raw, cache);
    let mut a = raw.clone();
    problem.clamp_action(&mut a);
    (a, raw)
}

/// Result of one Monte Carlo gradient estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct StepEstimate {
    /// Raw parameter delta; the optimizer applies θ ← θ − lr·delta.
    pub delta: Vec<f64>,
    /// Batch mean of (L^U Q)².
    pub critic_loss: f64,
    /// Batch mean of H(U, Q).
    pub actor_loss: f64,
}

struct Partial {
    grad: Vec<f64>,
    sq: f64,
    ham: f64,
}

fn reduce(partials: Vec<Result<Partial>>, n_params: usize, m: usize, scale: f64) -> Result<StepEstimate> {
    let mut delta = vec![0.0; n_params];
    let (mut sq, mut ham) = (0.0, 0.0);
    for p in partials {
        let p = p?;
        for (d, g) in delta.iter_mut().zip(&p.grad) {
            *d += g;
        }
        sq += p.sq;
        ham += p.ham;
    }
    let w = scale / m as f64;
    delta.iter_mut().for_each(|v| *v *= w);
    Ok(StepEstimate {
        delta,
        critic_loss: sq / m as f64,
        actor_loss: ham / m as f64,
    })
}

/// Clipped Q-PDE gradient (1/m) Σ_j F(L^U Q(x_j)) ∇_φ(−Q(x_j)), times `scale`.
pub fn critic_gradient_step(
    problem: &ProblemSpec,
    critic: &dyn ValueModel,
    actor: &dyn Policy,
    fam: &TruncationFamily,
    batch: &[Vec<f64>],
    scale: f64,
) -> Result<StepEstimate> {
    let n_params = critic.num_params();
    let partials: Vec<Result<Partial>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut part = Partial {
                grad: vec![0.0; n_params],
                sq: 0.0,
                ham: 0.0,
            };
            for x in chunk {
                let (a, _) = applied_action(problem, actor, x);
                let (mut sq, mut ham) = (0.0, 0.0);
                let mut weight = |jet: &dyn Jet| -> Result<f64> {
                    let (l, h) = generator_value(problem, jet, x, &a)?;
                    sq = l * l;
                    ham = h;
                    Ok(fam.big_f(l))
                };
                critic.accumulate_weighted(x, &mut weight, &mut part.grad)?;
                part.sq += sq;
                part.ham += ham;
            }
            Ok(part)
        })
        .collect();
    reduce(partials, n_params, batch.len().max(1), scale)
}

/// Clipped actor gradient (1/m) Σ_j ψ(∂_u H(x_j)) ∇_θ U(x_j), times `scale`.
///
/// With `loss_floor = Some(δ)`, points where L^U Q ≤ δ are dropped.
pub fn actor_gradient_step(
    problem: &ProblemSpec,
    critic: &dyn ValueModel,
    actor: &dyn Policy,
    fam: &TruncationFamily,
    batch: &[Vec<f64>],
    loss_floor: Option<f64>,
    scale: f64,
) -> Result<StepEstimate> {
    let n_params = actor.num_params();
    let clamp = problem.action_clamp;
    let partials: Vec<Result<Partial>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut part = Partial {
                grad: vec![0.0; n_params],
                sq: 0.0,
                ham: 0.0,
            };
            let mut w = vec![0.0; actor.action_dim()];
            let mut cache = Vec::new();
            for x in chunk {
                let (a, raw) = applied_action_cached(problem, actor, x, &mut cache);
                let ev = generator(problem, critic.jet_at(x).as_ref(), x, &a)?;
                part.sq += ev.value * ev.value;
                part.ham += ev.hamiltonian;
                if loss_floor.is_some_and(|floor| ev.value <= floor) {
                    continue;
                }
                for (l, wl) in w.iter_mut().enumerate() {
                    let dclamp = clamp.map_or(1.0, |c| c.derivative(raw[l]));
                    *wl = fam.psi(ev.du_hamiltonian[l]) * dclamp;
                }
                actor.accumulate_gradient_cached(x, &cache, &w, &mut part.grad);
            }
            Ok(part)
        })
        .collect();
    reduce(partials, n_params, batch.len().max(1), scale)
}

/// The NTK rate factor N^{2β−1}.
pub fn ntk_rate(width: usize, beta: f64) -> f64 {
    (width as f64).powf(2.0 * beta - 1.0)
}
