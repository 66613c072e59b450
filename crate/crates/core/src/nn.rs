//! Single-hidden-layer tanh networks with 1/N^β output scaling.
//!
//! All derivatives are closed form. For σ = tanh we use σ' = 1 − σ² and
//! σ'' = −2σσ'. Parameters live in one flat vector laid out as
//! `[outer (k×N, row-major) | inner (N×d, row-major) | bias (N)]`, which is
//! also the layout of every gradient returned from this module.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{dot, DenseJet, Jet, SharedField};

pub const DEFAULT_BETA: f64 = 0.75;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OuterDist {
    #[default]
    UniformPm1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InnerDist {
    #[default]
    StdNormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BiasDist {
    #[default]
    UniformPm1,
}

/// Initialization law for (outer, inner, bias). The defaults meet the moment
/// conditions of the limit analysis: bounded mean-zero outer weights, finite
/// third moment for inner weights, finite first moment for biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct InitSpec {
    pub outer: OuterDist,
    pub inner: InnerDist,
    pub bias: BiasDist,
    pub seed: u64,
}

impl InitSpec {
    pub fn with_seed(seed: u64) -> Self {
        InitSpec {
            seed,
            ..Default::default()
        }
    }

    pub fn sample_outer<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.outer {
            OuterDist::UniformPm1 => rng.random_range(-1.0..=1.0),
        }
    }

    pub fn sample_inner<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.inner {
            InnerDist::StdNormal => rng.sample(StandardNormal),
        }
    }

    pub fn sample_bias<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.bias {
            BiasDist::UniformPm1 => rng.random_range(-1.0..=1.0),
        }
    }
}

#[inline]
pub fn sigma(u: f64) -> f64 {
    u.tanh()
}

#[inline]
pub fn sigma_prime(u: f64) -> f64 {
    let t = u.tanh();
    1.0 - t * t
}

#[inline]
pub fn sigma_second(u: f64) -> f64 {
    let t = u.tanh();
    -2.0 * t * (1.0 - t * t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShallowNet {
    width: usize,
    input_dim: usize,
    output_dim: usize,
    beta: f64,
    activation: Activation,
    seed: u64,
    params: Vec<f64>,
}

pub fn validate_beta(beta: f64) -> Result<()> {
    if !(beta > 0.5 && beta < 1.0) {
        return Err(Error::config(format!("beta must lie in (0.5, 1), got {beta}")));
    }
    Ok(())
}

impl ShallowNet {
    pub fn init(width: usize, input_dim: usize, output_dim: usize, beta: f64, spec: InitSpec) -> Result<Self> {
        let mut net = Self::zeros(width, input_dim, output_dim, beta)?;
        net.seed = spec.seed;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (n, d, k) = (width, input_dim, output_dim);
        let (outer, rest) = net.params.split_at_mut(k * n);
        let (inner, bias) = rest.split_at_mut(n * d);
        for v in outer.iter_mut() {
            *v = spec.sample_outer(&mut rng);
        }
        for v in inner.iter_mut() {
            *v = spec.sample_inner(&mut rng);
        }
        for v in bias.iter_mut() {
            *v = spec.sample_bias(&mut rng);
        }
        Ok(net)
    }

    pub fn zeros(width: usize, input_dim: usize, output_dim: usize, beta: f64) -> Result<Self> {
        if width == 0 || input_dim == 0 || output_dim == 0 {
            return Err(Error::config(format!(
                "network dimensions must be positive (N={width}, d={input_dim}, k={output_dim})"
            )));
        }
        validate_beta(beta)?;
        Ok(ShallowNet {
            width,
            input_dim,
            output_dim,
            beta,
            activation: Activation::Tanh,
            seed: 0,
            params: vec![0.0; output_dim * width + width * input_dim + width],
        })
    }

    /// Builds a network from explicit parameter blocks.
    pub fn from_parts(beta: f64, outer: Vec<f64>, inner: Vec<f64>, bias: Vec<f64>, output_dim: usize) -> Result<Self> {
        let width = bias.len();
        if width == 0 || output_dim == 0 || outer.len() != output_dim * width || inner.len() % width != 0 {
            return Err(Error::Dimension(format!(
                "inconsistent parameter blocks: outer {}, inner {}, bias {}, k {}",
                outer.len(),
                inner.len(),
                width,
                output_dim
            )));
        }
        let input_dim = inner.len() / width;
        let mut net = Self::zeros(width, input_dim, output_dim, beta)?;
        let mut params = outer;
        params.extend(inner);
        params.extend(bias);
        net.params = params;
        Ok(net)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// N^{−β}
    pub fn scale(&self) -> f64 {
        (self.width as f64).powf(-self.beta)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn outer(&self) -> &[f64] {
        &self.params[..self.output_dim * self.width]
    }

    pub fn inner(&self) -> &[f64] {
        let start = self.output_dim * self.width;
        &self.params[start..start + self.width * self.input_dim]
    }

    pub fn bias(&self) -> &[f64] {
        let start = self.output_dim * self.width + self.width * self.input_dim;
        &self.params[start..]
    }

    pub fn outer_mut(&mut self) -> &mut [f64] {
        let end = self.output_dim * self.width;
        &mut self.params[..end]
    }

    /// Index ranges of the (outer, inner, bias) blocks in the flat layout.
    pub fn block_ranges(&self) -> [std::ops::Range<usize>; 3] {
        let a = self.output_dim * self.width;
        let b = a + self.width * self.input_dim;
        [0..a, a..b, b..self.params.len()]
    }

    pub fn inner_row(&self, i: usize) -> &[f64] {
        let d = self.input_dim;
        &self.inner()[i * d..(i + 1) * d]
    }

    pub fn pre_activation(&self, i: usize, x: &[f64]) -> f64 {
        dot(self.inner_row(i), x) + self.bias()[i]
    }

    pub fn hidden(&self, x: &[f64]) -> Vec<f64> {
        let mut h = self.pre_activations(x);
        h.iter_mut().for_each(|u| *u = sigma(*u));
        h
    }

    /// w_i·x + b_i for all hidden units.
    pub fn pre_activations(&self, x: &[f64]) -> Vec<f64> {
        let d = self.input_dim;
        self.inner()
            .chunks_exact(d)
            .zip(self.bias())
            .map(|(w, b)| dot(w, x) + b)
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim];
        self.forward_into(x, &mut out);
        out
    }

    pub fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.input_dim);
        let h = self.hidden(x);
        let s = self.scale();
        let n = self.width;
        let outer = self.outer();
        for (l, o) in out.iter_mut().enumerate() {
            *o = s * dot(&outer[l * n..(l + 1) * n], &h);
        }
    }

    /// Scalar output for k = 1 networks.
    pub fn forward_scalar(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(self.output_dim, 1);
        self.scale() * dot(self.outer(), &self.hidden(x))
    }

    /// Adds Σ_l weight_l ∇_θ U_l(x) into `out` (flat layout).
    pub fn accumulate_output_gradient(&self, x: &[f64], weight: &[f64], out: &mut [f64]) {
        let h = self.hidden(x);
        self.accumulate_output_gradient_with(x, &h, weight, out);
    }

    /// As `accumulate_output_gradient`, reusing the activations `hidden = σ(Wx + b)`.
    pub fn accumulate_output_gradient_with(&self, x: &[f64], hidden: &[f64], weight: &[f64], out: &mut [f64]) {
        let (n, d) = (self.width, self.input_dim);
        let s = self.scale();
        let outer = self.outer();
        let [_, ri, rb] = self.block_ranges();
        let (g_outer, rest) = out.split_at_mut(ri.start);
        let (g_inner, g_bias) = rest.split_at_mut(rb.start - ri.start);
        let mut back = vec![0.0; n];
        for (l, &w) in weight.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let sw = s * w;
            for ((g, c), (b, t)) in g_outer[l * n..(l + 1) * n]
                .iter_mut()
                .zip(&outer[l * n..(l + 1) * n])
                .zip(back.iter_mut().zip(hidden))
            {
                *g += sw * t;
                *b += sw * c;
            }
        }
        for i in 0..n {
            let t = hidden[i];
            let g = back[i] * (1.0 - t * t);
            if g != 0.0 {
                for (r, xj) in g_inner[i * d..(i + 1) * d].iter_mut().zip(x) {
                    *r += g * xj;
                }
                g_bias[i] += g;
            }
        }
    }

    /// Σ_j ⟨weight_j, ∇_θ U(x_j)⟩, accumulated in point order.
    pub fn param_gradient<'a, I>(&self, points: I) -> Vec<f64>
    where
        I: IntoIterator<Item = (&'a [f64], &'a [f64])>,
    {
        let mut out = vec![0.0; self.num_params()];
        for (x, w) in points {
            self.accumulate_output_gradient(x, w, &mut out);
        }
        out
    }

    /// Value, gradient and Hessian in x of a k = 1 network.
    pub fn input_jet(&self, x: &[f64]) -> DenseJet {
        let (n, d) = (self.width, self.input_dim);
        let s = self.scale();
        let c = self.outer();
        let mut jet = DenseJet::zeros(d);
        for i in 0..n {
            let u = self.pre_activation(i, x);
            let t = u.tanh();
            let dt = 1.0 - t * t;
            let d2t = -2.0 * t * dt;
            let w = self.inner_row(i);
            jet.value += s * c[i] * t;
            let g = s * c[i] * dt;
            let h = s * c[i] * d2t;
            for a in 0..d {
                jet.grad[a] += g * w[a];
                for b in 0..d {
                    jet.hess[a * d + b] += h * w[a] * w[b];
                }
            }
        }
        jet
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            activation: self.activation,
            beta: self.beta,
            width: self.width,
            input_dim: self.input_dim,
            output_dim: self.output_dim,
            seed: self.seed,
            outer: self.outer().to_vec(),
            inner: self.inner().to_vec(),
            bias: self.bias().to_vec(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {} (expected {CHECKPOINT_VERSION})",
                ck.format_version
            )));
        }
        let (n, d, k) = (ck.width, ck.input_dim, ck.output_dim);
        if ck.outer.len() != k * n || ck.inner.len() != n * d || ck.bias.len() != n {
            return Err(Error::Checkpoint("parameter block sizes disagree with N, d, k".into()));
        }
        if ck.outer.iter().chain(&ck.inner).chain(&ck.bias).any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        let mut net = ShallowNet::from_parts(ck.beta, ck.outer.clone(), ck.inner.clone(), ck.bias.clone(), k)?;
        net.seed = ck.seed;
        Ok(net)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }
}

/// On-disk network format (JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub activation: Activation,
    pub beta: f64,
    #[serde(rename = "N")]
    pub width: usize,
    #[serde(rename = "d")]
    pub input_dim: usize,
    #[serde(rename = "k")]
    pub output_dim: usize,
    pub seed: u64,
    pub outer: Vec<f64>,
    pub inner: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Checkpoint {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    }
}

/// Hard-constrained critic Q(x) = Z(x)·η(x) + ḡ(x).
#[derive(Clone)]
pub struct CriticNet {
    pub z: ShallowNet,
    pub eta: SharedField,
    pub gbar: SharedField,
}

impl std::fmt::Debug for CriticNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CriticNet").field("z", &self.z).finish_non_exhaustive()
    }
}

impl CriticNet {
    pub fn new(z: ShallowNet, eta: SharedField, gbar: SharedField) -> Result<Self> {
        if z.output_dim() != 1 {
            return Err(Error::Dimension("critic inner network must be scalar".into()));
        }
        if eta.dim() != z.input_dim() || gbar.dim() != z.input_dim() {
            return Err(Error::Dimension("η / ḡ dimension differs from critic input".into()));
        }
        Ok(CriticNet { z, eta, gbar })
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let eta = self.eta.value(x);
        let z = if eta == 0.0 { 0.0 } else { self.z.forward_scalar(x) };
        z * eta + self.gbar.value(x)
    }

    pub fn jet(&self, x: &[f64]) -> CriticJet<'_> {
        CriticJet::new(self, x)
    }

    /// Adds weight · ∇_φ(−Q(x)) = −weight · η(x) ∇_φ Z(x) into `out`.
    pub fn accumulate_neg_value_gradient(&self, x: &[f64], weight: f64, out: &mut [f64]) {
        let w = -weight * self.eta.value(x);
        if w != 0.0 {
            let h = self.z.hidden(x);
            self.z.accumulate_output_gradient_with(x, &h, &[w], out);
        }
    }

    /// As `accumulate_neg_value_gradient`, reusing the activations cached in `jet`.
    pub fn accumulate_neg_value_gradient_from(&self, jet: &CriticJet<'_>, x: &[f64], weight: f64, out: &mut [f64]) {
        let w = -weight * jet.eta.value;
        if w != 0.0 {
            self.z.accumulate_output_gradient_with(x, &jet.hidden, &[w], out);
        }
    }

    pub fn param_gradient<'a, I>(&self, points: I) -> Vec<f64>
    where
        I: IntoIterator<Item = (&'a [f64], f64)>,
    {
        let mut out = vec![0.0; self.z.num_params()];
        for (x, w) in points {
            self.accumulate_neg_value_gradient(x, w, &mut out);
        }
        out
    }
}

/// Cached analytic derivatives of the critic at one point.
pub struct CriticJet<'a> {
    net: &'a ShallowNet,
    /// s·c_i·σ''(w_i·x + b_i)
    curvature: Vec<f64>,
    hidden: Vec<f64>,
    z: f64,
    grad_z: Vec<f64>,
    hess_z_diag: Vec<f64>,
    eta: DenseJet,
    gbar: DenseJet,
    value: f64,
    grad: Vec<f64>,
}

impl<'a> CriticJet<'a> {
    fn new(critic: &'a CriticNet, x: &[f64]) -> Self {
        let net = &critic.z;
        let (n, d) = (net.width(), net.input_dim());
        let s = net.scale();
        let c = net.outer();
        let mut curvature = vec![0.0; n];
        let mut hidden = vec![0.0; n];
        let mut z = 0.0;
        let mut grad_z = vec![0.0; d];
        let mut hess_z_diag = vec![0.0; d];
        for i in 0..n {
            let w = net.inner_row(i);
            let u = dot(w, x) + net.bias()[i];
            let t = u.tanh();
            let dt = 1.0 - t * t;
            let sc = s * c[i];
            z += sc * t;
            let g = sc * dt;
            let h = sc * (-2.0 * t * dt);
            curvature[i] = h;
            hidden[i] = t;
            for j in 0..d {
                grad_z[j] += g * w[j];
                hess_z_diag[j] += h * w[j] * w[j];
            }
        }
        let eta = critic.eta.jet(x);
        let gbar = critic.gbar.jet(x);
        let value = z * eta.value + gbar.value;
        let grad = (0..d)
            .map(|j| eta.value * grad_z[j] + z * eta.grad[j] + gbar.grad[j])
            .collect();
        CriticJet {
            net,
            curvature,
            hidden,
            z,
            grad_z,
            hess_z_diag,
            eta,
            gbar,
            value,
            grad,
        }
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn grad_z(&self) -> &[f64] {
        &self.grad_z
    }

    /// pᵀ Hess Z p via Σ_i s c_i σ''_i (w_i·p)²; O(N d) per direction.
    pub fn z_quad(&self, p: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (i, h) in self.curvature.iter().enumerate() {
            let wp = dot(self.net.inner_row(i), p);
            acc += h * wp * wp;
        }
        acc
    }
}

impl Jet for CriticJet<'_> {
    fn value(&self) -> f64 {
        self.value
    }

    fn grad(&self) -> &[f64] {
        &self.grad
    }

    fn dir2(&self, p: &[f64], s: &[f64]) -> f64 {
        // Product rule on Z·η + ḡ.
        let quad = self.eta.value * self.z_quad(p)
            + 2.0 * dot(p, &self.grad_z) * dot(p, &self.eta.grad)
            + self.z * self.eta.quad(p)
            + self.gbar.quad(p);
        quad + 2.0 * dot(s, &self.grad)
    }

    fn hess_diag(&self) -> Vec<f64> {
        let d = self.grad.len();
        (0..d)
            .map(|j| {
                self.eta.value * self.hess_z_diag[j]
                    + 2.0 * self.grad_z[j] * self.eta.grad[j]
                    + self.z * self.eta.hess[j * d + j]
                    + self.gbar.hess[j * d + j]
            })
            .collect()
    }

    fn hessian(&self) -> Vec<f64> {
        let d = self.grad.len();
        let mut h = vec![0.0; d * d];
        for (i, c) in self.curvature.iter().enumerate() {
            let w = self.net.inner_row(i);
            for a in 0..d {
                for b in 0..d {
                    h[a * d + b] += c * w[a] * w[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..d {
                h[a * d + b] = self.eta.value * h[a * d + b]
                    + self.grad_z[a] * self.eta.grad[b]
                    + self.eta.grad[a] * self.grad_z[b]
                    + self.z * self.eta.hess[a * d + b]
                    + self.gbar.hess[a * d + b];
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Domain;
    use crate::field::{Constant, FnField};
    use std::sync::Arc;

    const H: f64 = 1e-5;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-3)
    }

    fn random_x(d: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..d).map(|_| rng.random_range(-0.7..0.7)).collect()
    }

    fn quad_gbar(d: usize) -> SharedField {
        Arc::new(FnField::new(d, move |x: &[f64]| {
            let mut j = DenseJet::zeros(d);
            j.value = x[0] * x[0] + 0.5 * x[d - 1];
            j.grad[0] = 2.0 * x[0];
            j.grad[d - 1] += 0.5;
            j.hess[0] = 2.0;
            j
        }))
    }

    fn critic(n: usize, d: usize, seed: u64) -> CriticNet {
        let z = ShallowNet::init(n, d, 1, 0.75, InitSpec::with_seed(seed)).unwrap();
        CriticNet::new(z, Arc::new(Domain::ball(1.0, d).unwrap()), quad_gbar(d)).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = ShallowNet::init(4, 2, 1, 0.75, InitSpec::with_seed(7)).unwrap();
        let b = ShallowNet::init(4, 2, 1, 0.75, InitSpec::with_seed(7)).unwrap();
        assert_eq!(a.params(), b.params());
        let c = ShallowNet::init(4, 2, 1, 0.75, InitSpec::with_seed(8)).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn init_rejects_bad_beta_and_dims() {
        assert!(ShallowNet::init(4, 2, 1, 0.5, InitSpec::default()).is_err());
        assert!(ShallowNet::init(4, 2, 1, 1.0, InitSpec::default()).is_err());
        assert!(ShallowNet::init(0, 2, 1, 0.75, InitSpec::default()).is_err());
        assert!(ShallowNet::init(4, 0, 1, 0.75, InitSpec::default()).is_err());
    }

    #[test]
    fn init_moments() {
        let spec = InitSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = 100_000;
        let abs_w = (0..m).map(|_| spec.sample_inner(&mut rng).abs()).sum::<f64>() / m as f64;
        assert!((abs_w - (2.0 / std::f64::consts::PI).sqrt()).abs() < 0.01);
        let c: Vec<f64> = (0..m).map(|_| spec.sample_outer(&mut rng)).collect();
        let mean = c.iter().sum::<f64>() / m as f64;
        // Var of U[-1,1] is 1/3.
        assert!(mean.abs() < 3.0 * (1.0 / 3.0 / m as f64).sqrt());
        assert!(c.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn forward_trivial_cases() {
        let mut net = ShallowNet::init(8, 3, 2, 0.75, InitSpec::with_seed(1)).unwrap();
        net.outer_mut().iter_mut().for_each(|c| *c = 0.0);
        assert_eq!(net.forward(&[0.1, 0.2, 0.3]), vec![0.0, 0.0]);
        let one = ShallowNet::from_parts(0.75, vec![1.0], vec![0.0], vec![0.0], 1).unwrap();
        assert_eq!(one.forward_scalar(&[0.4]), 0.0);
    }

    fn two_sum(a: f64, b: f64) -> (f64, f64) {
        let s = a + b;
        let bb = s - a;
        (s, (a - (s - bb)) + (b - bb))
    }

    /// Compensated direct summation of N^{−β} Σ_i c_i tanh(Σ_j w_ij x_j + b_i).
    fn forward_oracle(net: &ShallowNet, x: &[f64], l: usize) -> f64 {
        let n = net.width();
        let (mut s, mut e) = (0.0, 0.0);
        for i in 0..n {
            let (mut u, mut ue) = (net.bias()[i], 0.0);
            for (w, xj) in net.inner_row(i).iter().zip(x) {
                let p = w * xj;
                let pe = w.mul_add(*xj, -p);
                let (t, te) = two_sum(u, p);
                u = t;
                ue += te + pe;
            }
            let term = net.outer()[l * n + i] * (u + ue).tanh();
            let (t, te) = two_sum(s, term);
            s = t;
            e += te;
        }
        (s + e) * (n as f64).powf(-net.beta())
    }

    #[test]
    fn forward_matches_compensated_oracle() {
        for seed in 0..5 {
            let net = ShallowNet::init(64, 10, 3, 0.75, InitSpec::with_seed(seed)).unwrap();
            let x = random_x(10, 100 + seed);
            let y = net.forward(&x);
            for (l, v) in y.iter().enumerate() {
                let o = forward_oracle(&net, &x, l);
                assert!((v - o).abs() <= 1e-12 * o.abs().max(1e-300) + 1e-15, "{v} vs {o}");
            }
        }
    }

    #[test]
    fn outer_scaling_is_linear() {
        let net = ShallowNet::init(16, 3, 2, 0.75, InitSpec::with_seed(2)).unwrap();
        let mut scaled = net.clone();
        scaled.outer_mut().iter_mut().for_each(|c| *c *= 2.5);
        let x = [0.1, -0.4, 0.3];
        for (a, b) in net.forward(&x).iter().zip(scaled.forward(&x)) {
            assert!((2.5 * a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn input_jet_matches_finite_differences() {
        let d = 10;
        let net = ShallowNet::init(64, d, 1, 0.75, InitSpec::with_seed(3)).unwrap();
        let x = random_x(d, 4);
        let jet = net.input_jet(&x);
        for a in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[a] += H;
            xm[a] -= H;
            let fd = (net.forward_scalar(&xp) - net.forward_scalar(&xm)) / (2.0 * H);
            assert!(rel(jet.grad[a], fd) < 1e-6);
            let gp = net.input_jet(&xp).grad;
            let gm = net.input_jet(&xm).grad;
            for b in 0..d {
                let fd2 = (gp[b] - gm[b]) / (2.0 * H);
                assert!(rel(jet.hess[a * d + b], fd2) < 1e-6);
            }
        }
    }

    #[test]
    fn boundary_value_is_exact() {
        let c = critic(32, 3, 5);
        let dom = Domain::ball(1.0, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for x in dom.sample_boundary(200, &mut rng) {
            assert!((c.value(&x) - c.gbar.value(&x)).abs() <= 1e-12);
        }
        let z = ShallowNet::init(32, 3, 1, 0.75, InitSpec::with_seed(5)).unwrap();
        let cube = Domain::cube(1.0, 3).unwrap();
        let c = CriticNet::new(z, Arc::new(cube), quad_gbar(3)).unwrap();
        for x in cube.sample_boundary(200, &mut rng) {
            assert_eq!(c.value(&x), c.gbar.value(&x));
        }
    }

    #[test]
    fn constant_z_gives_bubble() {
        // Z ≡ k0 via c = k0 N^β / tanh(b) with w = 0.
        let k0 = 0.8;
        let b = 0.5f64;
        let z = ShallowNet::from_parts(0.75, vec![k0 / b.tanh()], vec![0.0, 0.0], vec![b], 1).unwrap();
        let c = CriticNet::new(z, Arc::new(Domain::ball(1.0, 2).unwrap()), Arc::new(Constant { dim: 2, value: 0.0 })).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x = [rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7)];
            let expect = k0 * (1.0 - x[0] * x[0] - x[1] * x[1]);
            assert!((c.value(&x) - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_z_gives_gbar_derivatives() {
        let mut c = critic(8, 3, 1);
        c.z.outer_mut().iter_mut().for_each(|v| *v = 0.0);
        let x = [0.3, 0.1, -0.2];
        let jet = c.jet(&x);
        assert!((jet.value() - (0.09 - 0.1)).abs() < 1e-15);
        assert_eq!(jet.grad(), &[0.6, 0.0, 0.5]);
        assert!((jet.dir2(&[1.0, 0.0, 0.0], &[0.0; 3]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn critic_jet_matches_finite_differences() {
        for d in [1, 4, 10] {
            let c = critic(48, d, d as u64);
            for k in 0..10 {
                let x = random_x(d, 50 + k);
                let x: Vec<f64> = x.iter().map(|v| v / (d as f64).sqrt()).collect();
                let jet = c.jet(&x);
                for a in 0..d {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[a] += H;
                    xm[a] -= H;
                    let fd = (c.value(&xp) - c.value(&xm)) / (2.0 * H);
                    assert!(rel(jet.grad()[a], fd) < 1e-6, "d={d} a={a}");
                }
                let p = random_x(d, 900 + k);
                let s = random_x(d, 1900 + k);
                // Second derivative at h = 0 of h ↦ Q(x + h p + h² s).
                let q = |h: f64| {
                    let y: Vec<f64> = (0..d).map(|j| x[j] + h * p[j] + h * h * s[j]).collect();
                    c.value(&y)
                };
                let h = 1e-4;
                let fd2 = (q(h) - 2.0 * q(0.0) + q(-h)) / (h * h);
                assert!(rel(jet.dir2(&p, &s), fd2) < 1e-5, "d={d}: {} vs {fd2}", jet.dir2(&p, &s));
                let full = jet.hessian();
                let diag = jet.hess_diag();
                for j in 0..d {
                    assert!((full[j * d + j] - diag[j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn actor_param_gradient_matches_finite_differences() {
        let mut net = ShallowNet::init(16, 3, 2, 0.75, InitSpec::with_seed(9)).unwrap();
        let x = [0.2, -0.5, 0.4];
        let w = [0.7, -1.3];
        let g = net.param_gradient([(&x[..], &w[..])]);
        let obj = |n: &ShallowNet| n.forward(&x).iter().zip(&w).map(|(u, w)| u * w).sum::<f64>();
        for i in 0..net.num_params() {
            let p0 = net.params()[i];
            net.params_mut()[i] = p0 + H;
            let fp = obj(&net);
            net.params_mut()[i] = p0 - H;
            let fm = obj(&net);
            net.params_mut()[i] = p0;
            let fd = (fp - fm) / (2.0 * H);
            assert!((g[i] - fd).abs() <= 1e-6 * fd.abs().max(1e-2), "param {i}");
        }
    }

    #[test]
    fn actor_outer_gradient_by_hand() {
        let net = ShallowNet::init(5, 2, 1, 0.75, InitSpec::with_seed(4)).unwrap();
        let x = [0.3, 0.6];
        let g = net.param_gradient([(&x[..], &[1.0][..])]);
        for i in 0..5 {
            assert_eq!(g[i], net.scale() * net.pre_activation(i, &x).tanh());
        }
        let z = net.param_gradient([(&x[..], &[0.0][..])]);
        assert!(z.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn critic_param_gradient_matches_finite_differences() {
        let mut c = critic(16, 3, 12);
        let x = [0.2, -0.1, 0.4];
        let g = c.param_gradient([(&x[..], 1.0)]);
        let eta = c.eta.value(&x);
        for i in 0..16 {
            let expect = -eta * c.z.scale() * c.z.pre_activation(i, &x).tanh();
            assert!((g[i] - expect).abs() < 1e-15);
        }
        for i in 0..c.z.num_params() {
            let p0 = c.z.params()[i];
            c.z.params_mut()[i] = p0 + H;
            let fp = -c.value(&x);
            c.z.params_mut()[i] = p0 - H;
            let fm = -c.value(&x);
            c.z.params_mut()[i] = p0;
            let fd = (fp - fm) / (2.0 * H);
            assert!((g[i] - fd).abs() <= 1e-6 * fd.abs().max(1e-2), "param {i}");
        }
        let on_boundary = [1.0, 0.0, 0.0];
        assert!(c.param_gradient([(&on_boundary[..], 1.0)]).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_accumulation_is_reproducible() {
        let net = ShallowNet::init(32, 4, 2, 0.75, InitSpec::with_seed(2)).unwrap();
        let pts: Vec<(Vec<f64>, Vec<f64>)> = (0..20).map(|k| (random_x(4, k), random_x(2, 100 + k))).collect();
        let run = || net.param_gradient(pts.iter().map(|(x, w)| (&x[..], &w[..])));
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = ShallowNet::init(12, 3, 2, 0.6, InitSpec::with_seed(21)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        net.to_checkpoint().save(&path).unwrap();
        let back = ShallowNet::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        assert_eq!(back, net);
        let mut bad = net.to_checkpoint();
        bad.format_version = 99;
        assert!(ShallowNet::from_checkpoint(&bad).is_err());
        let mut bad = net.to_checkpoint();
        bad.bias.pop();
        assert!(ShallowNet::from_checkpoint(&bad).is_err());
    }
}
