//! Minimal dense-tensor compute core with reverse-mode differentiation.
//!
//! Operations are recorded on a [`Graph`] tape as they execute; calling
//! [`Graph::backward`] on a scalar walks the tape in reverse. Shape errors are
//! programming errors and panic before any arithmetic happens.

mod graph;
mod scalar;
mod tensor;

use thiserror::Error;

pub use graph::{Graph, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("backward called twice on the same graph")]
    BackwardTwice,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("target id {id} out of range for vocabulary of {vocab}")]
    TargetOutOfRange { id: usize, vocab: usize },
}
