//! Particle-ensemble simulator and audit toolkit for two-layer networks
//! trained by noisy gradient descent with weight decay under an output
//! scale `α`, covering the mean-field (`α = O(1)`) through NTK-like
//! (`α ≫ 1`) regimes.

pub mod activation;
pub mod data;
pub mod dynamics;
pub mod eigen;
pub mod error;
pub mod harness;
pub mod kernel;
pub mod metrics;
pub mod model;
pub mod ntk_flow;
pub mod rng;
pub mod theory;

pub use activation::{Activation, GConstants};
pub use data::{Dataset, GaussianTeacher};
pub use error::{Error, Result};
pub use model::{Ensemble, GaussianPrior, HyperParams};
