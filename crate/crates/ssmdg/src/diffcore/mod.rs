//! Dense-tensor numerics with reverse-mode differentiation, a
//! finite-difference gradient checker, and an AdamW optimizer.

mod check;
mod optim;
mod tape;
mod tensor;

pub use check::finite_diff_check;
pub use optim::{AdamWHyper, AdamWState};
pub use tape::{GradientMap, NodeId, OpKind, ParamMap, Tape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected {expected} operand(s), got {got}")]
    ArityMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("log of non-positive value {0}")]
    LogDomain(f64),
    #[error("data length {len} does not match shape {shape:?}")]
    BadShape { len: usize, shape: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("graph already consumed by a previous backward")]
    GraphConsumed,
    #[error("gradient/parameter key mismatch: {0}")]
    KeyMismatch(String),
    #[error("index {index} out of range for axis of extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },
    #[error("non-finite loss evaluation during finite-difference check")]
    NonFiniteLoss,
}

pub type Result<T> = std::result::Result<T, DiffError>;
