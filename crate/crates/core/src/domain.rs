//! State-space domains: the open ball B(0,R) and the cube (−R,R)^d, each with
//! its auxiliary function η (positive inside, zero on the boundary).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{norm_sq, separable_product_jet, DenseJet, ScalarField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainKind {
    Ball,
    Box,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub kind: DomainKind,
    pub radius: f64,
    pub dim: usize,
}

impl Domain {
    pub fn new(kind: DomainKind, radius: f64, dim: usize) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::config(format!("domain radius must be positive, got {radius}")));
        }
        if dim == 0 {
            return Err(Error::config("domain dimension must be positive"));
        }
        Ok(Domain { kind, radius, dim })
    }

    pub fn ball(radius: f64, dim: usize) -> Result<Self> {
        Self::new(DomainKind::Ball, radius, dim)
    }

    pub fn cube(radius: f64, dim: usize) -> Result<Self> {
        Self::new(DomainKind::Box, radius, dim)
    }

    /// Ball: R² − ‖x‖². Box: Π (R² − x_i²).
    pub fn eta_jet(&self, x: &[f64]) -> DenseJet {
        let r2 = self.radius * self.radius;
        let d = self.dim;
        match self.kind {
            DomainKind::Ball => {
                let mut jet = DenseJet::zeros(d);
                jet.value = r2 - norm_sq(x);
                for j in 0..d {
                    jet.grad[j] = -2.0 * x[j];
                    jet.hess[j * d + j] = -2.0;
                }
                jet
            }
            DomainKind::Box => {
                let f: Vec<f64> = x.iter().map(|v| r2 - v * v).collect();
                let df: Vec<f64> = x.iter().map(|v| -2.0 * v).collect();
                let d2f = vec![-2.0; d];
                separable_product_jet(&f, &df, &d2f)
            }
        }
    }

    pub fn eta(&self, x: &[f64]) -> f64 {
        let r2 = self.radius * self.radius;
        match self.kind {
            DomainKind::Ball => r2 - norm_sq(x),
            DomainKind::Box => x.iter().map(|v| r2 - v * v).product(),
        }
    }

    /// Strict interior membership.
    pub fn contains(&self, x: &[f64]) -> bool {
        match self.kind {
            DomainKind::Ball => norm_sq(x) < self.radius * self.radius,
            DomainKind::Box => x.iter().all(|v| v.abs() < self.radius),
        }
    }

    /// Lebesgue volume of the domain.
    pub fn volume(&self) -> f64 {
        let d = self.dim as f64;
        match self.kind {
            DomainKind::Ball => {
                let half = d / 2.0;
                std::f64::consts::PI.powf(half) / libm::tgamma(half + 1.0) * self.radius.powf(d)
            }
            DomainKind::Box => (2.0 * self.radius).powf(d),
        }
    }

    /// One uniform interior point (rejecting the measure-zero boundary).
    pub fn sample_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        loop {
            let x = match self.kind {
                DomainKind::Ball => {
                    let mut v: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
                    let norm = norm_sq(&v).sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let u: f64 = rng.random();
                    let r = self.radius * u.powf(1.0 / self.dim as f64);
                    for c in v.iter_mut() {
                        *c *= r / norm;
                    }
                    v
                }
                DomainKind::Box => (0..self.dim)
                    .map(|_| rng.random_range(-self.radius..self.radius))
                    .collect(),
            };
            if self.eta(&x) > 0.0 {
                return x;
            }
        }
    }

    pub fn sample_interior<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Vec<Vec<f64>> {
        (0..m).map(|_| self.sample_point(rng)).collect()
    }

    /// Uniform on ∂Ω. For the cube every face has the same area, so a face is
    /// chosen uniformly and the free coordinates are uniform on it.
    pub fn sample_boundary<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Vec<Vec<f64>> {
        (0..m)
            .map(|_| match self.kind {
                DomainKind::Ball => loop {
                    let mut v: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
                    let norm = norm_sq(&v).sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    for c in v.iter_mut() {
                        *c *= self.radius / norm;
                    }
                    break v;
                },
                DomainKind::Box => {
                    let face = rng.random_range(0..2 * self.dim);
                    let mut v: Vec<f64> = (0..self.dim)
                        .map(|_| rng.random_range(-self.radius..=self.radius))
                        .collect();
                    v[face / 2] = if face % 2 == 0 { self.radius } else { -self.radius };
                    v
                }
            })
            .collect()
    }

    /// Where the segment from `inside` to `outside` first meets ∂Ω, as the
    /// fraction θ ∈ [0,1] along the segment and the crossing point itself.
    pub fn segment_exit(&self, inside: &[f64], outside: &[f64]) -> (f64, Vec<f64>) {
        let delta: Vec<f64> = outside.iter().zip(inside).map(|(o, i)| o - i).collect();
        let r = self.radius;
        match self.kind {
            DomainKind::Ball => {
                // ‖inside + θ δ‖² = R², root in [0,1].
                let a = norm_sq(&delta);
                let b = 2.0 * inside.iter().zip(&delta).map(|(p, q)| p * q).sum::<f64>();
                let c = norm_sq(inside) - r * r;
                let theta = if a == 0.0 {
                    0.0
                } else {
                    let disc = (b * b - 4.0 * a * c).max(0.0);
                    ((-b + disc.sqrt()) / (2.0 * a)).clamp(0.0, 1.0)
                };
                let mut p: Vec<f64> = inside.iter().zip(&delta).map(|(x, q)| x + theta * q).collect();
                let norm = norm_sq(&p).sqrt();
                if norm > 0.0 {
                    for v in p.iter_mut() {
                        *v *= r / norm;
                    }
                }
                (theta, p)
            }
            DomainKind::Box => {
                let mut theta = 1.0;
                let mut hit = None;
                for j in 0..self.dim {
                    if outside[j].abs() >= r && delta[j] != 0.0 {
                        let bound = r.copysign(outside[j]);
                        let t = ((bound - inside[j]) / delta[j]).clamp(0.0, 1.0);
                        if t <= theta {
                            theta = t;
                            hit = Some((j, bound));
                        }
                    }
                }
                let mut p: Vec<f64> = inside.iter().zip(&delta).map(|(x, q)| x + theta * q).collect();
                for v in p.iter_mut() {
                    *v = v.clamp(-r, r);
                }
                if let Some((j, bound)) = hit {
                    p[j] = bound;
                }
                (theta, p)
            }
        }
    }
}

impl ScalarField for Domain {
    fn dim(&self) -> usize {
        self.dim
    }

    fn jet(&self, x: &[f64]) -> DenseJet {
        self.eta_jet(x)
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.eta(x)
    }
}
