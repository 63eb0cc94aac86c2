use std::io;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("dtype mismatch: expected {expected}, found {found}")]
    DtypeMismatch { expected: u8, found: u8 },

    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),

    #[error("malformed header: {0}")]
    BadHeader(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("excess payload: expected {expected} bytes, found {found}")]
    ExcessData { expected: usize, found: usize },

    #[error("dimension overflow: {0:?}")]
    DimensionOverflow(Vec<u64>),

    #[error("label {label} out of range for {num_classes} classes")]
    InvalidLabel { label: usize, num_classes: usize },

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("input dims {dims:?} must be divisible by {multiple}")]
    Indivisible { dims: [usize; 3], multiple: usize },

    #[error("parameter {0:?} not found")]
    MissingParam(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
