//! Gradients of multi-layer softmax-attention transformers, computed two
//! ways: an exact dense reference path and a factored low-rank path whose
//! arithmetic cost grows near-linearly in sequence length. Every fast kernel
//! is checked against the dense oracle and against finite differences.

pub mod causal;
pub mod error;
pub mod exact;
pub mod fastgrad;
pub mod lowrank;
pub mod matrix;
pub mod model;
pub mod rng;

pub use error::{Error, Result};
pub use matrix::{DenseMatrix, FlopCounter};
