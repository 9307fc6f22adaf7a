//! Lossless width and depth expansion of Transformers (and CNN bottleneck
//! blocks), with a reference forward pass to check it.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`). The
//! main entry points are [`expander::expand_model`], [`model::model_forward`],
//! the [`checkpoint`] container and [`recipe::verify_lossless`].

// Index loops mirror the math in the kernels; keep them.
#![allow(clippy::needless_range_loop)]

pub mod checkpoint;
pub mod cnn;
pub mod error;
pub mod expand;
pub mod expander;
pub mod model;
pub mod recipe;
pub mod rng;
pub mod scalar;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
pub use expander::{expand_model, DepthMode, ExpansionPlan, Policy};
pub use model::{ModelSpec, ModelWeights, NormStyle};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ModelWeights32 = ModelWeights<f32>;
pub type ModelWeights64 = ModelWeights<f64>;
