//! Stochastic control problems: coefficient interfaces, the LQR benchmark and
//! the constructed-problem framework with its presets.
//!
//! A constructed problem fixes (V, u*, b, Φ, ζ) and defines the running cost
//! c(x,a) = ζ(x,a) + γV(x) − b(x,a)·∇V(x) − ½ Tr(ΦΦᵀ(x,a) Hess V(x)),
//! so that V solves the HJB equation and u* attains the infimum.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::domain::Domain;
use crate::error::{Error, Result};
use crate::field::{dot, norm_sq, separable_product_jet, Constant, DenseJet, FnField, ScalarField, SharedField};

/// Diffusion matrix Φ(x,a) ∈ ℝ^{d×d′}, stored by columns.
#[derive(Debug, Clone, PartialEq)]
pub enum Diffusion {
    /// Square diagonal matrix (d′ = d).
    Diagonal(Vec<f64>),
    /// General matrix as a list of d′ columns of length d.
    Columns(Vec<Vec<f64>>),
}

impl Diffusion {
    pub fn noise_dim(&self) -> usize {
        match self {
            Diffusion::Diagonal(v) => v.len(),
            Diffusion::Columns(c) => c.len(),
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Diffusion::Diagonal(v) => v.len(),
            Diffusion::Columns(c) => c.first().map_or(0, Vec::len),
        }
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        match self {
            Diffusion::Diagonal(v) => {
                let mut col = vec![0.0; v.len()];
                col[j] = v[j];
                col
            }
            Diffusion::Columns(c) => c[j].clone(),
        }
    }

    pub fn to_columns(&self) -> Diffusion {
        Diffusion::Columns((0..self.noise_dim()).map(|j| self.column(j)).collect())
    }

    /// ½ Tr(ΦΦᵀ H) for a dense row-major H.
    pub fn half_trace(&self, hess: &[f64]) -> f64 {
        let d = self.state_dim();
        match self {
            Diffusion::Diagonal(v) => 0.5 * v.iter().enumerate().map(|(j, s)| s * s * hess[j * d + j]).sum::<f64>(),
            Diffusion::Columns(cols) => {
                let mut acc = 0.0;
                for col in cols {
                    for a in 0..d {
                        if col[a] == 0.0 {
                            continue;
                        }
                        acc += col[a] * dot(&hess[a * d..(a + 1) * d], col);
                    }
                }
                0.5 * acc
            }
        }
    }

    /// Φ ξ
    pub fn apply(&self, xi: &[f64], out: &mut [f64]) {
        match self {
            Diffusion::Diagonal(v) => {
                for ((o, s), z) in out.iter_mut().zip(v).zip(xi) {
                    *o = s * z;
                }
            }
            Diffusion::Columns(cols) => {
                out.iter_mut().for_each(|o| *o = 0.0);
                for (col, z) in cols.iter().zip(xi) {
                    for (o, c) in out.iter_mut().zip(col) {
                        *o += c * z;
                    }
                }
            }
        }
    }

    /// Dense ΦΦᵀ, row-major d×d.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.state_dim();
        let mut m = vec![0.0; d * d];
        for j in 0..self.noise_dim() {
            let col = self.column(j);
            for a in 0..d {
                for b in 0..d {
                    m[a * d + b] += col[a] * col[b];
                }
            }
        }
        m
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Diffusion::Diagonal(v) => v.iter().all(|s| s.is_finite()),
            Diffusion::Columns(c) => c.iter().flatten().all(|s| s.is_finite()),
        }
    }
}

/// Controlled coefficients b, Φ and running cost c.
pub trait Dynamics: Send + Sync {
    fn drift(&self, x: &[f64], a: &[f64], out: &mut [f64]);

    fn diffusion(&self, x: &[f64], a: &[f64]) -> Diffusion;

    fn running_cost(&self, x: &[f64], a: &[f64]) -> f64;
}

pub type ControlFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type DriftFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
pub type DiffusionFn = Arc<dyn Fn(&[f64], &[f64]) -> Diffusion + Send + Sync>;
pub type ZetaFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// Element-wise clamp applied to raw actor output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionClamp {
    pub lo: f64,
    pub hi: f64,
}

impl ActionClamp {
    pub fn apply(&self, a: &mut [f64]) {
        for v in a.iter_mut() {
            *v = v.clamp(self.lo, self.hi);
        }
    }

    /// Sub-gradient of the clamp: 1 strictly inside, 0 at or beyond a bound.
    pub fn derivative(&self, raw: f64) -> f64 {
        if raw > self.lo && raw < self.hi {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Clone)]
pub struct AnalyticSolution {
    pub value: SharedField,
    pub control: ControlFn,
}

impl AnalyticSolution {
    pub fn control_at(&self, x: &[f64], k: usize) -> Vec<f64> {
        let mut out = vec![0.0; k];
        (self.control)(x, &mut out);
        out
    }
}

#[derive(Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub domain: Domain,
    pub action_dim: usize,
    pub noise_dim: usize,
    pub gamma: f64,
    pub dynamics: Arc<dyn Dynamics>,
    /// ḡ, the interpolated boundary condition.
    pub boundary: SharedField,
    pub action_clamp: Option<ActionClamp>,
    pub analytic: Option<AnalyticSolution>,
    /// Penalty ζ for constructed problems.
    pub zeta: Option<ZetaFn>,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("domain", &self.domain)
            .field("action_dim", &self.action_dim)
            .field("noise_dim", &self.noise_dim)
            .field("gamma", &self.gamma)
            .field("action_clamp", &self.action_clamp)
            .field("analytic", &self.analytic.is_some())
            .finish_non_exhaustive()
    }
}

impl ProblemSpec {
    pub fn dim(&self) -> usize {
        self.domain.dim
    }

    pub fn drift(&self, x: &[f64], a: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.dynamics.drift(x, a, &mut out);
        out
    }

    pub fn diffusion(&self, x: &[f64], a: &[f64]) -> Diffusion {
        self.dynamics.diffusion(x, a)
    }

    pub fn running_cost(&self, x: &[f64], a: &[f64]) -> f64 {
        self.dynamics.running_cost(x, a)
    }

    pub fn solution(&self) -> Result<&AnalyticSolution> {
        self.analytic
            .as_ref()
            .ok_or_else(|| Error::NoAnalyticSolution(self.name.clone()))
    }

    pub fn clamp_action(&self, a: &mut [f64]) {
        if let Some(c) = &self.action_clamp {
            c.apply(a);
        }
    }
}

/// Data of a reverse-engineered problem with known solution (V, u*).
#[derive(Clone)]
pub struct ConstructedSpec {
    pub name: String,
    pub domain: Domain,
    pub action_dim: usize,
    pub noise_dim: usize,
    pub gamma: f64,
    pub value: SharedField,
    pub control: ControlFn,
    pub drift: DriftFn,
    pub diffusion: DiffusionFn,
    pub zeta: ZetaFn,
    /// Constant value of V on ∂Ω, used as ḡ.
    pub boundary_value: f64,
    pub action_clamp: Option<ActionClamp>,
}

struct ConstructedDynamics {
    gamma: f64,
    value: SharedField,
    drift: DriftFn,
    diffusion: DiffusionFn,
    zeta: ZetaFn,
}

impl Dynamics for ConstructedDynamics {
    fn drift(&self, x: &[f64], a: &[f64], out: &mut [f64]) {
        (self.drift)(x, a, out)
    }

    fn diffusion(&self, x: &[f64], a: &[f64]) -> Diffusion {
        (self.diffusion)(x, a)
    }

    fn running_cost(&self, x: &[f64], a: &[f64]) -> f64 {
        let v = self.value.jet(x);
        let mut b = vec![0.0; x.len()];
        (self.drift)(x, a, &mut b);
        let phi = (self.diffusion)(x, a);
        (self.zeta)(x, a) + self.gamma * v.value - dot(&b, &v.grad) - phi.half_trace(&v.hess)
    }
}

pub fn make_constructed(spec: ConstructedSpec) -> ProblemSpec {
    let d = spec.domain.dim;
    let dynamics = ConstructedDynamics {
        gamma: spec.gamma,
        value: spec.value.clone(),
        drift: spec.drift,
        diffusion: spec.diffusion,
        zeta: spec.zeta.clone(),
    };
    ProblemSpec {
        name: spec.name,
        domain: spec.domain,
        action_dim: spec.action_dim,
        noise_dim: spec.noise_dim,
        gamma: spec.gamma,
        dynamics: Arc::new(dynamics),
        boundary: Arc::new(Constant {
            dim: d,
            value: spec.boundary_value,
        }),
        action_clamp: spec.action_clamp,
        analytic: Some(AnalyticSolution {
            value: spec.value,
            control: spec.control,
        }),
        zeta: Some(spec.zeta),
    }
}

/// Parameters of the nonlinear LQR variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LqrParams {
    pub p: f64,
    pub q: f64,
    pub xi: f64,
    pub gamma: f64,
    pub radius: f64,
    pub eps: f64,
}

impl Default for LqrParams {
    fn default() -> Self {
        LqrParams {
            p: 1.0,
            q: 1.0,
            xi: 1.0,
            gamma: 1.0,
            radius: 1.0,
            eps: -1.0,
        }
    }
}

impl LqrParams {
    /// k = (√(q²γ² + 4pqξ²) − γq) / (2ξ²)
    pub fn k(&self) -> f64 {
        let LqrParams { p, q, xi, gamma, .. } = *self;
        ((q * q * gamma * gamma + 4.0 * p * q * xi * xi).sqrt() - gamma * q) / (2.0 * xi * xi)
    }

    pub fn optimal_control(&self, x: &[f64], out: &mut [f64]) {
        let k = self.k();
        let LqrParams { q, xi, eps, .. } = *self;
        for (o, xi_) in out.iter_mut().zip(x) {
            *o = -xi_ * k * (xi + 2.0 * eps) / (q + 2.0 * k * eps * eps * xi_ * xi_);
        }
    }
}

struct LqrDynamics {
    params: LqrParams,
    k: f64,
}

impl Dynamics for LqrDynamics {
    fn drift(&self, _x: &[f64], a: &[f64], out: &mut [f64]) {
        for (o, ai) in out.iter_mut().zip(a) {
            *o = self.params.xi * ai;
        }
    }

    fn diffusion(&self, x: &[f64], a: &[f64]) -> Diffusion {
        let s2 = std::f64::consts::SQRT_2;
        let eps = self.params.eps;
        Diffusion::Diagonal(x.iter().zip(a).map(|(xi, ai)| s2 * (1.0 + eps * xi * ai)).collect())
    }

    fn running_cost(&self, x: &[f64], a: &[f64]) -> f64 {
        let LqrParams { q, xi, gamma, eps, .. } = self.params;
        let k = self.k;
        let d = x.len() as f64;
        let coupling = k * k * (xi + 2.0 * eps) * (xi + 2.0 * eps);
        let f_tilde = gamma * k * norm_sq(x)
            + x.iter().map(|v| coupling * v * v / (q + 2.0 * k * eps * eps * v * v)).sum::<f64>()
            - 2.0 * k * d;
        q * norm_sq(a) + f_tilde
    }
}

pub fn make_lqr(dim: usize, params: LqrParams) -> Result<ProblemSpec> {
    let LqrParams { p, q, xi, gamma, radius, eps } = params;
    for (name, v) in [("p", p), ("q", q), ("xi", xi), ("gamma", gamma), ("R", radius)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::config(format!("LQR parameter {name} must be positive, got {v}")));
        }
    }
    if !eps.is_finite() {
        return Err(Error::config("LQR parameter eps must be finite"));
    }
    let domain = Domain::ball(radius, dim)?;
    let k = params.k();
    let value = FnField::new(dim, move |x: &[f64]| {
        let mut jet = DenseJet::zeros(x.len());
        let d = x.len();
        jet.value = k * norm_sq(x);
        for j in 0..d {
            jet.grad[j] = 2.0 * k * x[j];
            jet.hess[j * d + j] = 2.0 * k;
        }
        jet
    });
    Ok(ProblemSpec {
        name: "lqr".into(),
        domain,
        action_dim: dim,
        noise_dim: dim,
        gamma,
        dynamics: Arc::new(LqrDynamics { params, k }),
        boundary: Arc::new(Constant {
            dim,
            value: k * radius * radius,
        }),
        action_clamp: None,
        analytic: Some(AnalyticSolution {
            value: Arc::new(value),
            control: Arc::new(move |x: &[f64], out: &mut [f64]| params.optimal_control(x, out)),
        }),
        zeta: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Lqr,
    Problem1,
    Problem2aZeta,
    Problem2aZetaStar,
    Problem2b,
    Problem3,
    Problem4,
    Problem5,
    Toy1d,
}

impl Preset {
    pub const ALL: [Preset; 9] = [
        Preset::Lqr,
        Preset::Problem1,
        Preset::Problem2aZeta,
        Preset::Problem2aZetaStar,
        Preset::Problem2b,
        Preset::Problem3,
        Preset::Problem4,
        Preset::Problem5,
        Preset::Toy1d,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Lqr => "lqr",
            Preset::Problem1 => "problem1",
            Preset::Problem2aZeta => "problem2a_zeta",
            Preset::Problem2aZetaStar => "problem2a_zeta_star",
            Preset::Problem2b => "problem2b",
            Preset::Problem3 => "problem3",
            Preset::Problem4 => "problem4",
            Preset::Problem5 => "problem5",
            Preset::Toy1d => "toy1d",
        }
    }

    pub fn description(&self) -> &'static str {
        match self {
            Preset::Lqr => "nonlinear LQR on the unit ball, dimension --dim (default 10)",
            Preset::Problem1 => "easy constructed problem, V = exp(-|x|^2), dimension --dim (default 10)",
            Preset::Problem2aZeta => "non-convex Hamiltonian, controlled diffusion, zeta = logcosh",
            Preset::Problem2aZetaStar => "non-convex Hamiltonian, zeta* = 100 logcosh",
            Preset::Problem2b => "convex Hamiltonian, control-free diffusion",
            Preset::Problem3 => "drift exponentially sensitive to the control, A = [-1000,1000]^3",
            Preset::Problem4 => "cube domain, controlled diffusion, A = R^10",
            Preset::Problem5 => "cube domain, scalar action",
            Preset::Toy1d => "one-dimensional convex test problem for limit-dynamics studies",
        }
    }

    pub fn takes_dim(&self) -> bool {
        matches!(self, Preset::Lqr | Preset::Problem1)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .iter()
            .copied()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::UnknownProblem(s.to_string()))
    }
}

pub const DEFAULT_PRESET_DIM: usize = 10;

pub fn preset(which: Preset, dim: Option<usize>) -> Result<ProblemSpec> {
    if dim.is_some() && !which.takes_dim() {
        if dim != Some(fixed_dim(which)) {
            return Err(Error::config(format!("problem {which} has fixed dimension {}", fixed_dim(which))));
        }
    }
    let d = dim.unwrap_or(fixed_dim(which));
    match which {
        Preset::Lqr => make_lqr(d, LqrParams::default()),
        Preset::Problem1 => Ok(problem1(d)),
        Preset::Problem2aZeta => Ok(problem2(Problem2Variant::Zeta)),
        Preset::Problem2aZetaStar => Ok(problem2(Problem2Variant::ZetaStar)),
        Preset::Problem2b => Ok(problem2(Problem2Variant::ConvexB)),
        Preset::Problem3 => Ok(problem3()),
        Preset::Problem4 => Ok(problem4()),
        Preset::Problem5 => Ok(problem5()),
        Preset::Toy1d => Ok(toy1d()),
    }
}

fn fixed_dim(which: Preset) -> usize {
    match which {
        Preset::Toy1d => 1,
        _ => DEFAULT_PRESET_DIM,
    }
}

pub fn preset_by_name(name: &str, dim: Option<usize>) -> Result<ProblemSpec> {
    preset(name.parse()?, dim)
}

/// log cosh z, stable for large |z|.
pub fn log_cosh(z: f64) -> f64 {
    let a = z.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

fn radial_jet(x: &[f64], f: f64, df: f64, d2f: f64) -> DenseJet {
    // V = φ(r²): ∇V = 2φ'x, Hess V = 2φ' I + 4φ'' x xᵀ.
    let d = x.len();
    let mut jet = DenseJet::zeros(d);
    jet.value = f;
    for a in 0..d {
        jet.grad[a] = 2.0 * df * x[a];
        for b in 0..d {
            jet.hess[a * d + b] = 4.0 * d2f * x[a] * x[b] + if a == b { 2.0 * df } else { 0.0 };
        }
    }
    jet
}

fn identity_diffusion(d: usize) -> DiffusionFn {
    Arc::new(move |_x: &[f64], _a: &[f64]| Diffusion::Diagonal(vec![1.0; d]))
}

/// V = exp(−‖x‖²), u* = x, b_i = a_i x_i, Φ = I, ζ = ‖x − a‖₁ + ‖x − a‖².
pub fn problem1(d: usize) -> ProblemSpec {
    let value = FnField::new(d, |x: &[f64]| {
        let v = (-norm_sq(x)).exp();
        radial_jet(x, v, -v, v)
    });
    make_constructed(ConstructedSpec {
        name: "problem1".into(),
        domain: Domain::ball(1.0, d).expect("valid domain"),
        action_dim: d,
        noise_dim: d,
        gamma: 1.0,
        value: Arc::new(value),
        control: Arc::new(|x: &[f64], out: &mut [f64]| out.copy_from_slice(x)),
        drift: Arc::new(|x: &[f64], a: &[f64], out: &mut [f64]| {
            for ((o, xi), ai) in out.iter_mut().zip(x).zip(a) {
                *o = ai * xi;
            }
        }),
        diffusion: identity_diffusion(d),
        zeta: Arc::new(|x: &[f64], a: &[f64]| {
            x.iter()
                .zip(a)
                .map(|(xi, ai)| {
                    let e = xi - ai;
                    e.abs() + e * e
                })
                .sum()
        }),
        boundary_value: (-1.0f64).exp(),
        action_clamp: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Problem2Variant {
    Zeta,
    ZetaStar,
    ConvexB,
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// V = sin‖x‖², u* = log Σ e^{x_i}, b_i = a sin x_i, one noise column,
/// ζ = logcosh(a − u*) (scaled by 100 for the ζ* variant).
fn problem2(variant: Problem2Variant) -> ProblemSpec {
    let d = DEFAULT_PRESET_DIM;
    let value = FnField::new(d, |x: &[f64]| {
        let r2 = norm_sq(x);
        radial_jet(x, r2.sin(), r2.cos(), -r2.sin())
    });
    let (name, scale, controlled) = match variant {
        Problem2Variant::Zeta => ("problem2a_zeta", 1.0, true),
        Problem2Variant::ZetaStar => ("problem2a_zeta_star", 100.0, true),
        Problem2Variant::ConvexB => ("problem2b", 1.0, false),
    };
    make_constructed(ConstructedSpec {
        name: name.into(),
        domain: Domain::ball(1.0, d).expect("valid domain"),
        action_dim: 1,
        noise_dim: 1,
        gamma: 1.0,
        value: Arc::new(value),
        control: Arc::new(|x: &[f64], out: &mut [f64]| out[0] = log_sum_exp(x)),
        drift: Arc::new(|x: &[f64], a: &[f64], out: &mut [f64]| {
            for (o, xi) in out.iter_mut().zip(x) {
                *o = a[0] * xi.sin();
            }
        }),
        diffusion: Arc::new(move |x: &[f64], a: &[f64]| {
            let a2 = if controlled { a[0] * a[0] } else { 0.0 };
            Diffusion::Columns(vec![x.iter().map(|xi| 1.0 + a2 + xi * xi).collect()])
        }),
        zeta: Arc::new(move |x: &[f64], a: &[f64]| scale * log_cosh(a[0] - log_sum_exp(x))),
        boundary_value: 1.0f64.sin(),
        action_clamp: None,
    })
}

/// V = 2‖x‖⁴ − ‖x‖², u* = (tanh x₁, sinh x₂, cosh x₃),
/// b_i = x_i(e^{a₁} + e^{a₂} + e^{a₃}) + e^{−x_i}, Φ = I, A = [−1000, 1000]³.
pub fn problem3() -> ProblemSpec {
    let d = DEFAULT_PRESET_DIM;
    let value = FnField::new(d, |x: &[f64]| {
        let r2 = norm_sq(x);
        radial_jet(x, 2.0 * r2 * r2 - r2, 4.0 * r2 - 1.0, 4.0)
    });
    let control = |x: &[f64], out: &mut [f64]| {
        out[0] = x[0].tanh();
        out[1] = x[1].sinh();
        out[2] = x[2].cosh();
    };
    make_constructed(ConstructedSpec {
        name: "problem3".into(),
        domain: Domain::ball(1.0, d).expect("valid domain"),
        action_dim: 3,
        noise_dim: d,
        gamma: 1.0,
        value: Arc::new(value),
        control: Arc::new(control),
        drift: Arc::new(|x: &[f64], a: &[f64], out: &mut [f64]| {
            let s = a[0].exp() + a[1].exp() + a[2].exp();
            for (o, xi) in out.iter_mut().zip(x) {
                *o = xi * s + (-xi).exp();
            }
        }),
        diffusion: identity_diffusion(d),
        zeta: Arc::new(move |x: &[f64], a: &[f64]| {
            let mut u = [0.0; 3];
            control(x, &mut u);
            (a[0] - u[0]).powi(2) + (a[1] - u[1]).powi(4) + (a[2] - u[2]).powi(6)
        }),
        boundary_value: 1.0,
        action_clamp: Some(ActionClamp {
            lo: -1000.0,
            hi: 1000.0,
        }),
    })
}

/// Cube domain; V = 1 + Π cos²(πx_i²/2), u*_i = x_i(1 + Π x_j),
/// b_i = a_i x_i + ‖x‖², Φ = (1 + ‖a‖²/10) I, ζ = ‖a − u*‖².
pub fn problem4() -> ProblemSpec {
    let d = DEFAULT_PRESET_DIM;
    let pi = std::f64::consts::PI;
    let value = FnField::new(d, move |x: &[f64]| {
        // f = 1 − sin²(πx²/2) = cos²(πx²/2); f' = −πx sin(πx²);
        // f'' = −π sin(πx²) − 2π²x² cos(πx²).
        let f: Vec<f64> = x.iter().map(|v| (pi * v * v / 2.0).cos().powi(2)).collect();
        let df: Vec<f64> = x.iter().map(|v| -pi * v * (pi * v * v).sin()).collect();
        let d2f: Vec<f64> = x
            .iter()
            .map(|v| -pi * (pi * v * v).sin() - 2.0 * pi * pi * v * v * (pi * v * v).cos())
            .collect();
        let mut jet = separable_product_jet(&f, &df, &d2f);
        jet.value += 1.0;
        jet
    });
    let control = |x: &[f64], out: &mut [f64]| {
        let prod: f64 = x.iter().product();
        for (o, xi) in out.iter_mut().zip(x) {
            *o = xi * (1.0 + prod);
        }
    };
    make_constructed(ConstructedSpec {
        name: "problem4".into(),
        domain: Domain::cube(1.0, d).expect("valid domain"),
        action_dim: d,
        noise_dim: d,
        gamma: 1.0,
        value: Arc::new(value),
        control: Arc::new(control),
        drift: Arc::new(|x: &[f64], a: &[f64], out: &mut [f64]| {
            let r2 = norm_sq(x);
            for ((o, xi), ai) in out.iter_mut().zip(x).zip(a) {
                *o = ai * xi + r2;
            }
        }),
        diffusion: Arc::new(move |_x: &[f64], a: &[f64]| {
            Diffusion::Diagonal(vec![1.0 + norm_sq(a) / 10.0; d])
        }),
        zeta: Arc::new(move |x: &[f64], a: &[f64]| {
            let mut u = vec![0.0; a.len()];
            control(x, &mut u);
            a.iter().zip(&u).map(|(ai, ui)| (ai - ui).powi(2)).sum()
        }),
        boundary_value: 1.0,
        action_clamp: None,
    })
}

/// Cube domain; V = 1 + ‖x‖² Π sin(πx_i), u* = x₁ sin(πx₃) + x₂,
/// b_i = x_i a (scalar action), Φ = I, ζ = (a − u*)².
pub fn problem5() -> ProblemSpec {
    let d = DEFAULT_PRESET_DIM;
    let pi = std::f64::consts::PI;
    let value = FnField::new(d, move |x: &[f64]| {
        let f: Vec<f64> = x.iter().map(|v| (pi * v).sin()).collect();
        let df: Vec<f64> = x.iter().map(|v| pi * (pi * v).cos()).collect();
        let d2f: Vec<f64> = x.iter().map(|v| -pi * pi * (pi * v).sin()).collect();
        let p = separable_product_jet(&f, &df, &d2f);
        let r2 = norm_sq(x);
        let n = x.len();
        let mut jet = DenseJet::zeros(n);
        jet.value = 1.0 + r2 * p.value;
        for a in 0..n {
            jet.grad[a] = 2.0 * x[a] * p.value + r2 * p.grad[a];
            for b in 0..n {
                jet.hess[a * n + b] = if a == b { 2.0 * p.value } else { 0.0 }
                    + 2.0 * x[a] * p.grad[b]
                    + 2.0 * x[b] * p.grad[a]
                    + r2 * p.hess[a * n + b];
            }
        }
        jet
    });
    let control = move |x: &[f64], out: &mut [f64]| out[0] = x[0] * (pi * x[2]).sin() + x[1];
    make_constructed(ConstructedSpec {
        name: "problem5".into(),
        domain: Domain::cube(1.0, d).expect("valid domain"),
        action_dim: 1,
        noise_dim: d,
        gamma: 1.0,
        value: Arc::new(value),
        control: Arc::new(control),
        drift: Arc::new(|x: &[f64], a: &[f64], out: &mut [f64]| {
            for (o, xi) in out.iter_mut().zip(x) {
                *o = xi * a[0];
            }
        }),
        diffusion: identity_diffusion(d),
        zeta: Arc::new(move |x: &[f64], a: &[f64]| {
            let mut u = [0.0];
            control(x, &mut u);
            (a[0] - u[0]).powi(2)
        }),
        boundary_value: 1.0,
        action_clamp: None,
    })
}

/// One-dimensional convex problem on (−1, 1): V = exp(−x²), u* = x, b = a,
/// Φ = 1, ζ = (a − u*)².
pub fn toy1d() -> ProblemSpec {
    let value = FnField::new(1, |x: &[f64]| {
        let v = (-x[0] * x[0]).exp();
        radial_jet(x, v, -v, v)
    });
    make_constructed(ConstructedSpec {
        name: "toy1d".into(),
        domain: Domain::ball(1.0, 1).expect("valid domain"),
        action_dim: 1,
        noise_dim: 1,
        gamma: 1.0,
        value: Arc::new(value),
        control: Arc::new(|x: &[f64], out: &mut [f64]| out[0] = x[0]),
        drift: Arc::new(|_x: &[f64], a: &[f64], out: &mut [f64]| out[0] = a[0]),
        diffusion: identity_diffusion(1),
        zeta: Arc::new(|x: &[f64], a: &[f64]| (a[0] - x[0]).powi(2)),
        boundary_value: (-1.0f64).exp(),
        action_clamp: None,
    })
}

/// Shared handle to a field, convenient for assembling custom problems.
pub fn shared<F: ScalarField + 'static>(f: F) -> SharedField {
    Arc::new(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pde::{generator, generator_for_field};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn points(p: &ProblemSpec, m: usize, seed: u64) -> Vec<Vec<f64>> {
        p.domain.sample_interior(m, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn lqr_k_value() {
        let k = LqrParams::default().k();
        assert!((k - (5f64.sqrt() - 1.0) / 2.0).abs() < 1e-15);
        assert!((k - 0.618034).abs() < 1e-6);
    }

    #[test]
    fn lqr_rejects_nonpositive_parameters() {
        for bad in [
            LqrParams { p: 0.0, ..Default::default() },
            LqrParams { q: -1.0, ..Default::default() },
            LqrParams { radius: 0.0, ..Default::default() },
        ] {
            assert!(make_lqr(3, bad).is_err());
        }
    }

    #[test]
    fn lqr_control_vanishes_at_origin() {
        let mut u = vec![1.0; 4];
        LqrParams::default().optimal_control(&[0.0; 4], &mut u);
        assert!(u.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lqr_plug_in_residual_and_stationarity() {
        for d in [1, 3, 10] {
            let p = make_lqr(d, LqrParams::default()).unwrap();
            let sol = p.solution().unwrap();
            for x in points(&p, 300, d as u64) {
                let u = sol.control_at(&x, d);
                let ev = generator_for_field(&p, &sol.value, &x, &u).unwrap();
                assert!(ev.value.abs() < 1e-10, "d={d}: {}", ev.value);
                assert!(ev.du_hamiltonian.iter().all(|g| g.abs() < 1e-6));
            }
        }
    }

    #[test]
    fn analytic_value_jets_match_finite_differences() {
        let h = 1e-5;
        for which in Preset::ALL {
            let p = preset(which, None).unwrap();
            let v = &p.solution().unwrap().value;
            let d = p.dim();
            for x in points(&p, 20, 3) {
                let jet = v.jet(&x);
                for a in 0..d {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[a] += h;
                    xm[a] -= h;
                    let fd = (v.value(&xp) - v.value(&xm)) / (2.0 * h);
                    assert!((jet.grad[a] - fd).abs() <= 1e-6 * fd.abs().max(1.0), "{which} grad {a}");
                    let (gp, gm) = (v.jet(&xp).grad, v.jet(&xm).grad);
                    for b in 0..d {
                        let fd2 = (gp[b] - gm[b]) / (2.0 * h);
                        assert!((jet.hess[a * d + b] - fd2).abs() <= 1e-6 * fd2.abs().max(1.0), "{which} hess {a},{b}");
                    }
                }
            }
        }
    }

    #[test]
    fn construction_identity_and_zeta() {
        for which in Preset::ALL {
            let p = preset(which, None).unwrap();
            let sol = p.solution().unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            for x in points(&p, 500, 5) {
                let u = sol.control_at(&x, p.action_dim);
                let ev = generator_for_field(&p, &sol.value, &x, &u).unwrap();
                assert!(ev.value.abs() <= 1e-9, "{which}: {}", ev.value);
                if let Some(zeta) = &p.zeta {
                    assert!(zeta(&x, &u).abs() <= 1e-12);
                    let a: Vec<f64> = u.iter().map(|v| v + rng.random_range(-2.0..2.0)).collect();
                    assert!(zeta(&x, &a) > 0.0);
                }
            }
        }
    }

    #[test]
    fn off_optimum_costs_more() {
        // With convex Hamiltonians, moving away from u* raises H(·, V).
        for which in [Preset::Problem2b, Preset::Problem4, Preset::Problem5, Preset::Toy1d, Preset::Lqr] {
            let p = preset(which, None).unwrap();
            let sol = p.solution().unwrap();
            for x in points(&p, 50, 8) {
                let u = sol.control_at(&x, p.action_dim);
                let jet = sol.value.jet(&x);
                let h0 = generator(&p, &jet, &x, &u).unwrap().hamiltonian;
                let a: Vec<f64> = u.iter().map(|v| v + 0.3).collect();
                assert!(generator(&p, &jet, &x, &a).unwrap().hamiltonian > h0, "{which}");
            }
        }
    }

    #[test]
    fn problem1_values_at_origin() {
        let p = problem1(10);
        let sol = p.solution().unwrap();
        assert_eq!(sol.value.value(&[0.0; 10]), 1.0);
        assert_eq!(sol.control_at(&[0.0; 10], 10), vec![0.0; 10]);
    }

    #[test]
    fn problem2b_diffusion_ignores_action() {
        let p = preset(Preset::Problem2b, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for x in points(&p, 20, 1) {
            let a: f64 = rng.random_range(-5.0..5.0);
            let b: f64 = rng.random_range(-5.0..5.0);
            assert_eq!(p.diffusion(&x, &[a]), p.diffusion(&x, &[b]));
            let col = p.diffusion(&x, &[a]).column(0);
            for (c, xi) in col.iter().zip(&x) {
                assert_eq!(*c, 1.0 + xi * xi);
            }
        }
        let q = preset(Preset::Problem2aZeta, None).unwrap();
        let x = vec![0.1; 10];
        assert_ne!(q.diffusion(&x, &[0.0]), q.diffusion(&x, &[1.0]));
    }

    #[test]
    fn problem2a_zeta_star_is_scaled() {
        let a = preset(Preset::Problem2aZeta, None).unwrap();
        let b = preset(Preset::Problem2aZetaStar, None).unwrap();
        let x = vec![0.05; 10];
        let (za, zb) = (a.zeta.as_ref().unwrap(), b.zeta.as_ref().unwrap());
        assert!((zb(&x, &[0.7]) - 100.0 * za(&x, &[0.7])).abs() < 1e-12);
    }

    #[test]
    fn problem3_control_and_clamp() {
        let p = problem3();
        assert_eq!(p.solution().unwrap().control_at(&[0.0; 10], 3), vec![0.0, 0.0, 1.0]);
        let mut a = [5000.0, -5000.0, 3.0];
        p.clamp_action(&mut a);
        assert_eq!(a, [1000.0, -1000.0, 3.0]);
    }

    #[test]
    fn problem4_value_at_origin() {
        assert_eq!(problem4().solution().unwrap().value.value(&[0.0; 10]), 2.0);
    }

    #[test]
    fn problem5_has_scalar_action() {
        let p = problem5();
        assert_eq!(p.action_dim, 1);
        let x: Vec<f64> = (0..10).map(|i| 0.05 * i as f64).collect();
        let b = p.drift(&x, &[2.0]);
        for (bi, xi) in b.iter().zip(&x) {
            assert_eq!(*bi, 2.0 * xi);
        }
    }

    #[test]
    fn log_cosh_is_stable_and_even() {
        assert_eq!(log_cosh(0.0), 0.0);
        assert!((log_cosh(800.0) - (800.0 - 2f64.ln())).abs() < 1e-9);
        assert_eq!(log_cosh(-3.0), log_cosh(3.0));
        assert!((log_cosh(0.5) - 0.5f64.cosh().ln()).abs() < 1e-15);
    }

    #[test]
    fn preset_names_round_trip() {
        for which in Preset::ALL {
            assert_eq!(which.name().parse::<Preset>().unwrap(), which);
        }
        assert!(matches!("nope".parse::<Preset>(), Err(Error::UnknownProblem(_))));
    }

    #[test]
    fn fixed_dimension_presets_reject_other_dims() {
        assert!(preset(Preset::Problem3, Some(5)).is_err());
        assert!(preset(Preset::Problem3, Some(10)).is_ok());
        assert_eq!(preset(Preset::Lqr, Some(50)).unwrap().dim(), 50);
        assert_eq!(preset(Preset::Problem1, None).unwrap().dim(), 10);
    }

    #[test]
    fn boundary_interpolant_matches_value_on_boundary() {
        for which in Preset::ALL {
            let p = preset(which, None).unwrap();
            let v = &p.solution().unwrap().value;
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            for x in p.domain.sample_boundary(50, &mut rng) {
                assert!((p.boundary.value(&x) - v.value(&x)).abs() < 1e-12, "{which}");
            }
        }
    }
}
