//! Role/filler tensor-product binding on small trainable sequence encoders,
//! with a from-scratch reverse-mode autodiff, a transfer-learning harness and
//! role/probe diagnostics.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar for common use.

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod head;
pub mod kv;
pub mod model;
pub mod nn;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod tpr;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};
pub use model::{ModelConfig, ModelFamily};
pub use scalar::Scalar;
pub use train::TrainConfig;
pub use transfer::TransferPlan;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = graph::Graph<f64>;
pub type ParamSet = params::ParamSet<f64>;
pub type Model = model::Model<f64>;
pub type Checkpoint = checkpoint::Checkpoint<f64>;
pub type TprParams = tpr::TprParams<f64>;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph32 = graph::Graph<f32>;
pub type ParamSet32 = params::ParamSet<f32>;
pub type Model32 = model::Model<f32>;
pub type Checkpoint32 = checkpoint::Checkpoint<f32>;
