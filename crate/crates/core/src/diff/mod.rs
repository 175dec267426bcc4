//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! Only the primitives the forecasting model needs are provided. A
//! [`Tape`] records each primitive as it is evaluated; [`Tape::backward`]
//! walks the record once in reverse and accumulates exact gradients into
//! every tensor that requires them. [`grad_check`] compares those gradients
//! with central finite differences.

mod gemm;
mod gradcheck;
pub mod io;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Tape, TapeNode, Var};
pub use tensor::{DiffTensor, Tensor};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("softmax row {row} has no valid positions")]
    AllMasked { row: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward on an empty tape")]
    EmptyTape,
    #[error("malformed parameter file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
