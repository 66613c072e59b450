//! Neural actor-critic solver for stationary Hamilton–Jacobi–Bellman equations
//! on bounded domains, with Monte Carlo verification and wide-network studies.

pub mod domain;
pub mod error;
pub mod field;
pub mod fit;
pub mod mc;
pub mod nn;
pub mod ntk;
pub mod optim;
pub mod pde;
pub mod problems;
pub mod trainer;

pub use domain::{Domain, DomainKind};
pub use error::{Error, Result};
pub use field::{DenseJet, Jet, ScalarField, SharedField};
pub use nn::{Checkpoint, CriticNet, InitSpec, ShallowNet};
pub use problems::{preset, preset_by_name, Diffusion, Dynamics, Preset, ProblemSpec};
