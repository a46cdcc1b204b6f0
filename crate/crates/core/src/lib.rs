//! Physics-informed echo state networks.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix double precision, which the experiments use throughout.

pub mod csvio;
pub mod dynamics;
pub mod error;
pub mod evaluation;
pub mod linalg;
pub mod optimizer;
pub mod persist;
pub mod reservoir;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix = linalg::DenseMatrix<f64>;
pub type Sparse = linalg::SparseMatrix<f64>;
pub type Model = dynamics::SystemModel<f64>;
pub type Series = dynamics::Trajectory<f64>;
pub type Esn = reservoir::EsnWeights<f64>;
pub type HybridEsn = reservoir::HybridEsnWeights<f64>;
pub type State = reservoir::EsnState<f64>;
pub type Physics = training::PhysicsConfig<f64>;
pub type Data = training::TrainingSet<f64>;

pub type Matrix32 = linalg::DenseMatrix<f32>;
pub type Model32 = dynamics::SystemModel<f32>;
pub type Series32 = dynamics::Trajectory<f32>;
pub type Esn32 = reservoir::EsnWeights<f32>;
