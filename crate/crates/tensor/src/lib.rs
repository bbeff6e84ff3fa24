//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes during a
//! forward pass. Calling [`Graph::backward`] on a scalar node walks the
//! tape in reverse insertion order and accumulates gradients into every
//! node that requires them. Learnable parameters live outside the graph in
//! a [`ParamStore`]; they enter a graph through [`Graph::param`] and receive
//! their gradients back through [`Graph::flush_grads`].
//!
//! The engine is generic over [`Scalar`] so the same model code runs in
//! 32-bit precision for training and in 64-bit precision for gradient
//! checks.

mod error;
mod graph;
mod kernels;
mod scalar;

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod param;

pub use error::{Result, TensorError};
pub use graph::{Graph, Var};
pub use optim::{AdamW, AdamWConfig, LrSchedule};
pub use param::{ParamId, ParamStore, Parameter};
pub use scalar::Scalar;

/// Number of elements implied by a shape.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}
