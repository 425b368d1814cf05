//! Dense matrices and a small reverse-mode differentiation tape.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport, GRAD_CHECK_FLOOR};
pub use matrix::{dot, sqdist, Matrix};
pub use tape::{Adjacency, Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("{op}: dimension mismatch {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{rows}x{cols} matrix cannot hold {len} values")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("rows have differing lengths")]
    RaggedRows,
    #[error("{op}: non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range for {len} rows")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("row {row} has zero norm")]
    ZeroNorm { row: usize },
    #[error("expected a 1x1 output, got {shape:?}")]
    NotScalar { shape: (usize, usize) },
    #[error("expected a square matrix, got {shape:?}")]
    NotSquare { shape: (usize, usize) },
}
