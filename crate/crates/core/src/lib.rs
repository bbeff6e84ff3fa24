//! Subspace learning of prefix-tuning parameters.
//!
//! A frozen transformer encoder is adapted through key/value prefixes that
//! are produced by a simplex of independently initialized reparameterization
//! networks. Training samples a convex combination of the vertices for every
//! observation, layer and key/value slot; the final model is the simplex
//! centroid baked into static tensors.
//!
//! Modules:
//! - [`model`]: encoder, tokenizer, masked-token pretraining
//! - [`subspace`]: prefix and head simplexes, sampling, centroid extraction
//! - [`trainer`]: training loop with early stopping and learning-rate search
//! - [`eval`]: metrics, stochastic development estimates, line scans, bootstrap tests
//! - [`data`]: corpus loading, few-shot splits, synthetic tasks

mod error;

pub mod data;
pub mod eval;
pub mod io;
pub mod model;
pub mod rng;
pub mod subspace;
pub mod trainer;

pub use error::{Error, Result};
pub use prefixsub_tensor as tensor;
