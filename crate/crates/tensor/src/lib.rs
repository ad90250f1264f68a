//! Deterministic reverse-mode automatic differentiation over `f64` tensors.
//!
//! The crate provides exactly the operators needed to train small
//! convolutional networks on the CPU: convolution, batch normalization,
//! pooling, nearest resampling, gating and the usual losses. Everything runs
//! on one thread, so repeated runs are bit-identical.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod error;
pub mod gradcheck;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{BatchStats, Gradients, Graph, NormStats, TraceEntry, Var};
pub use params::{ParamEntry, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;
