//! Minimal reverse-mode automatic differentiation over dense NCHW tensors.
//!
//! The engine covers exactly the operator set needed by the style-transfer
//! networks and losses in `lapstyle-core`: same-size convolutions with zero or
//! reflect padding, pooling, nearest and fixed-linear resampling, batched
//! matrix products, reductions along the last axis and element-wise maths.
//! Everything is generic over [`Real`] so the same model code runs in `f32`
//! for training and in `f64` for finite-difference gradient checks.

mod error;
mod graph;
pub mod gradcheck;
pub mod kernels;
mod scalar;
mod tensor;

pub use error::{GraphError, Result};
pub use graph::{Gradients, Graph, Var};
pub use kernels::Padding;
pub use scalar::{gemm, MatRef, Real};
pub use tensor::Tensor;
