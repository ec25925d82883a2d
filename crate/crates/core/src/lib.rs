//! Multi-norm adversarial training on a small, dependency-light numeric core.
//!
//! The crate is generic over the element type through [`Scalar`] (`f32` and
//! `f64`); the aliases at the crate root fix it to `f64`, which is what the
//! training and evaluation code paths are tuned for.

pub mod attacks;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod delta;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod gp;
pub mod losses;
pub mod model;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use attacks::{AttackKind, AttackSpec};
pub use error::{Error, Result};
pub use evaluation::RobustReport;
pub use geometry::{AttackNorm, Bounds, KeyPair};
pub use gp::{GpConfig, GpVariant};
pub use losses::{PairingKind, PairingLossConfig};
pub use scalar::Scalar;
pub use training::{EpochRecord, Method, TrainPlan};

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = autodiff::Graph<f64>;
pub type Mlp = model::Mlp<f64>;
pub type Dense = model::Dense<f64>;
pub type ModelGrads = model::ModelGrads<f64>;
pub type Sgd = optim::Sgd<f64>;
pub type ModelDelta = delta::ModelDelta<f64>;
pub type Dataset = data::Dataset<f64>;
pub type BallSpec = geometry::BallSpec<f64>;
pub type AdvBatch = attacks::AdvBatch<f64>;
pub type RampTerms = losses::RampTerms<f64>;
