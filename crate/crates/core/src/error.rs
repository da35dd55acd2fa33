use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

/// Failures raised by tensor operations and the autodiff tape.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    DataLength {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("softmax: row {row} is fully masked")]
    InvalidMask { row: usize },
    #[error("{op}: index {index} out of range for size {size}")]
    Index {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("cross entropy: every target position is padding")]
    EmptyLoss,
    #[error("backward: expected a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward: tape has already been differentiated")]
    BackwardTwice,
    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = core::result::Result<T, TensorError>;
