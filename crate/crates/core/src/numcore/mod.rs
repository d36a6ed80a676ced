//! Dense tensors, reverse-mode differentiation and the Adam optimizer.

mod adam;
mod params;
mod tape;

pub use adam::{adam_step, OptimizerState};
pub use params::{GradSet, Graph, Param, ParamId, ParamStore};
pub use tape::{DiffTensor, Primitive, Tape};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: [usize; 2], rhs: [usize; 2] },
    #[error("non-finite value produced by {op}")]
    NonFiniteValue { op: &'static str },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss([usize; 2]),
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("{0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, NumError>;
