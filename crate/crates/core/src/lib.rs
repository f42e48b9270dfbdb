//! Simulator for decoupled-embedding federated pre-training of small
//! decoder-only language models.

pub mod corpus;
pub mod costs;
pub mod dept;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod variant;

pub use error::{DeptError, Result};
pub use scalar::Scalar;
pub use variant::Variant;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type ModelParams64 = model::ModelParams<f64>;
pub type ModelParams32 = model::ModelParams<f32>;
pub type RunResult64 = dept::TrainRunResult<f64>;
pub type RunResult32 = dept::TrainRunResult<f32>;
