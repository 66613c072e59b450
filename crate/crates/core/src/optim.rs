//! First-order optimizers acting on flat parameter vectors.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::adam()
    }
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn build(&self, n_params: usize) -> Optimizer {
        match *self {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam { beta1, beta2, eps } => Optimizer::Adam(Adam {
                beta1,
                beta2,
                eps,
                t: 0,
                m: vec![0.0; n_params],
                v: vec![0.0; n_params],
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam(Adam),
}

impl Optimizer {
    /// θ ← θ − lr · step(g)
    pub fn apply(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam(st) => {
                st.t += 1;
                let t = st.t as i32;
                let c1 = 1.0 - st.beta1.powi(t);
                let c2 = 1.0 - st.beta2.powi(t);
                for i in 0..params.len() {
                    let g = grad[i];
                    st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * g;
                    st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * g * g;
                    let mhat = st.m[i] / c1;
                    let vhat = st.v[i] / c2;
                    params[i] -= lr * mhat / (vhat.sqrt() + st.eps);
                }
            }
        }
    }
}
