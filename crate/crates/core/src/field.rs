//! Smooth scalar fields with analytic first and second derivatives.
//!
//! Everything the solver needs from η, ḡ and analytic value functions is a
//! value, a gradient and a dense Hessian at a point. Dimensions in this crate
//! are small (d ≤ a few hundred), so the Hessian is stored densely row-major.

use std::sync::Arc;

/// Value, gradient and row-major Hessian of a scalar field at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseJet {
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
}

impl DenseJet {
    pub fn zeros(dim: usize) -> Self {
        DenseJet {
            value: 0.0,
            grad: vec![0.0; dim],
            hess: vec![0.0; dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.grad.len()
    }

    pub fn hess_entry(&self, i: usize, j: usize) -> f64 {
        self.hess[i * self.dim() + j]
    }

    /// pᵀ H p
    pub fn quad(&self, p: &[f64]) -> f64 {
        let d = self.dim();
        let mut acc = 0.0;
        for i in 0..d {
            if p[i] == 0.0 {
                continue;
            }
            let row = &self.hess[i * d..(i + 1) * d];
            acc += p[i] * dot(row, p);
        }
        acc
    }
}

pub trait ScalarField: Send + Sync {
    fn dim(&self) -> usize;

    fn jet(&self, x: &[f64]) -> DenseJet;

    fn value(&self, x: &[f64]) -> f64 {
        self.jet(x).value
    }
}

pub type SharedField = Arc<dyn ScalarField>;

/// A constant function; the boundary interpolant of every shipped problem.
#[derive(Debug, Clone, Copy)]
pub struct Constant {
    pub dim: usize,
    pub value: f64,
}

impl ScalarField for Constant {
    fn dim(&self) -> usize {
        self.dim
    }

    fn jet(&self, _x: &[f64]) -> DenseJet {
        let mut j = DenseJet::zeros(self.dim);
        j.value = self.value;
        j
    }

    fn value(&self, _x: &[f64]) -> f64 {
        self.value
    }
}

/// Scalar field given by a closure returning the full jet.
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(&[f64]) -> DenseJet + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        FnField { dim, f }
    }
}

impl<F> ScalarField for FnField<F>
where
    F: Fn(&[f64]) -> DenseJet + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn jet(&self, x: &[f64]) -> DenseJet {
        (self.f)(x)
    }
}

/// Jet of a product Π f_i(x_i) of univariate factors, given each factor's
/// value and first two derivatives. Products over excluded indices are formed
/// directly so zero factors are handled without division.
pub fn separable_product_jet(f: &[f64], df: &[f64], d2f: &[f64]) -> DenseJet {
    let d = f.len();
    let mut jet = DenseJet::zeros(d);
    jet.value = f.iter().product();
    for j in 0..d {
        let others: f64 = (0..d).filter(|&i| i != j).map(|i| f[i]).product();
        jet.grad[j] = df[j] * others;
        jet.hess[j * d + j] = d2f[j] * others;
        for k in (j + 1)..d {
            let rest: f64 = (0..d).filter(|&i| i != j && i != k).map(|i| f[i]).product();
            let v = df[j] * df[k] * rest;
            jet.hess[j * d + k] = v;
            jet.hess[k * d + j] = v;
        }
    }
    jet
}

/// Dot product with four independent accumulators.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum()
}

/// Local second-order model of a value function at a fixed point: what the
/// generator needs from either a critic network or an analytic solution.
pub trait Jet {
    fn value(&self) -> f64;

    fn grad(&self) -> &[f64];

    /// pᵀ Hess p + 2 s·∇, the second derivative at h = 0 of h ↦ f(x + h p + h² s).
    fn dir2(&self, p: &[f64], s: &[f64]) -> f64;

    fn hess_diag(&self) -> Vec<f64>;

    /// Dense row-major Hessian. Used by oracles and small problems only.
    fn hessian(&self) -> Vec<f64>;
}

impl Jet for DenseJet {
    fn value(&self) -> f64 {
        self.value
    }

    fn grad(&self) -> &[f64] {
        &self.grad
    }

    fn dir2(&self, p: &[f64], s: &[f64]) -> f64 {
        self.quad(p) + 2.0 * dot(s, &self.grad)
    }

    fn hess_diag(&self) -> Vec<f64> {
        let d = self.dim();
        (0..d).map(|i| self.hess[i * d + i]).collect()
    }

    fn hessian(&self) -> Vec<f64> {
        self.hess.clone()
    }
}
