//! Reverse-mode differentiation over small dense tensors.
//!
//! A [`Tape`] is built fresh for every forward pass. Parameters enter as
//! borrowed leaves, every operation appends a node, and [`Tape::backward`]
//! walks the nodes in reverse to accumulate gradients. The hard threshold
//! node ([`Tape::ste_threshold`]) emits `{0, 1}` forward and passes its
//! incoming gradient through unchanged.

mod tape;
mod tensor;

pub use tape::{sigmoid, softmax, Tape, Var};
#[cfg(test)]
pub(crate) use tensor::dot;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data of length {len} does not fill shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("division by zero")]
    ZeroDivisor,
    #[error("cannot pool an empty list")]
    EmptyPool,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("threshold {0} must lie strictly between 0 and 1")]
    InvalidThreshold(f64),
    #[error("backward already ran on this tape; reset gradients first")]
    BackwardTwice,
}
