//! Task-routed mixture-of-experts multi-task learner for aspect-level
//! implicit sentiment analysis, built on a small reverse-mode autodiff core.
//!
//! The numeric core is generic over the scalar type ([`scalar::Scalar`],
//! implemented for `f32` and `f64`); the concrete aliases below pin the
//! default working precision to 64-bit floats. Checkpoints store tensors
//! as little-endian `f32`.

pub mod analysis;
pub mod data;
pub mod model;
pub mod objectives;
pub mod train;
pub mod moe;
pub mod nn;
pub mod scalar;
pub mod tensor;

pub use scalar::Scalar;
pub use tensor::{Mode, Tape, Tensor, TensorError};

/// Default working precision for training and evaluation.
pub type DefaultScalar = f64;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape64 = tensor::Tape<f64>;
