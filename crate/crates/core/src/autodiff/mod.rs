//! Minimal dense reverse-mode autodiff: tensors, a computation tape,
//! the AdamW optimizer, finite-difference checking and checkpoint I/O.

mod checkpoint;
mod gradcheck;
pub mod nn;
mod optim;
pub mod special;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use gradcheck::{finite_difference, grad_check, grad_check_in, grad_check_params, GRAD_CHECK_STEP};
pub use optim::{AdamW, AdamWConfig};
pub use tape::{logsumexp, softmax_in_place, InputGrads, Tape, Var};
pub use tensor::{Gradients, ParamId, ParamStore, Parameter, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("log of non-positive value {0}")]
    NonPositiveLog(f64),
    #[error("backward requires a scalar loss, got {rows}x{cols}")]
    NonScalarBackward { rows: usize, cols: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("reduction over an empty set in {0}")]
    EmptyReduction(&'static str),
    #[error("mask entries must be 0 or 1")]
    InvalidMask,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
}

impl AutodiffError {
    pub(crate) fn shape(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        AutodiffError::ShapeMismatch { op, lhs, rhs }
    }
}
