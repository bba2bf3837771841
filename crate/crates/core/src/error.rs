//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("zero-norm row {0}")]
    ZeroNormRow(usize),
    #[error("dimension mismatch: {context}: {left} vs {right}")]
    DimMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },
    #[error("shape mismatch: {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("{context}: {requirement}")]
    Invalid {
        context: &'static str,
        requirement: String,
    },
    #[error("no text row for label {0:?}")]
    MissingTextRow(String),
    #[error("degenerate inter-similarity (|mean| <= 1e-9)")]
    DegenerateInterSimilarity,
    #[error("{msg} at line {line}")]
    DumpFormat { line: usize, msg: String },
    #[error("missing header")]
    MissingHeader,
    #[error("category {0:?} has no support scene")]
    NoSupport(String),
    #[error("numeric abort at step {step}: {what}")]
    NumericAbort { step: usize, what: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
