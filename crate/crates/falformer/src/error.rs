//! Crate-wide error type.
//!
//! Variants are grouped by how the CLI maps them to exit codes:
//! usage errors exit 1, data errors exit 2, numeric failures exit 3.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // -------- usage --------
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    // -------- data --------
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: String,
        expected: [u8; 4],
        found: [u8; 4],
    },
    #[error("unsupported format version {found} in {path}")]
    UnsupportedVersion { path: String, found: u8 },
    #[error("truncated file {path}: needed {needed} more bytes while reading {context}")]
    Truncated {
        path: String,
        context: &'static str,
        needed: usize,
    },
    #[error("shape overflow in {path}: {rows} x {cols} does not fit the file")]
    ShapeOverflow {
        path: String,
        rows: u64,
        cols: u64,
    },
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("unknown split tag {tag:?} at {path}:{line} (expected train, val or test)")]
    UnknownSplit {
        path: String,
        line: usize,
        tag: String,
    },
    #[error("duplicate bag id {id:?}")]
    DuplicateId { id: String },
    #[error("label mismatch for bag {id:?}: manifest says {manifest}, bag file says {bag}")]
    LabelMismatch {
        id: String,
        manifest: usize,
        bag: usize,
    },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("checkpoint/config mismatch: {0}")]
    ConfigMismatch(String),

    // -------- numeric --------
    #[error("shape mismatch in {op}: left is {lhs_rows}x{lhs_cols}, right is {rhs_rows}x{rhs_cols}")]
    ShapeMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },
    #[error("length mismatch in {what}: expected {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),
    #[error("zero matrix has no pseudoinverse initialization")]
    ZeroMatrix,
    #[error("segment assignment required for falsa attention but none was provided")]
    MissingAssignment,
    #[error("non-finite gradient in tensor {tensor}; training aborted")]
    NonFiniteGradient { tensor: String },
    #[error("not differentiable: {0}")]
    NotDifferentiable(&'static str),
}

impl Error {
    /// Stable CLI exit-code contract: 0 success, 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        use Error::*;
        match self {
            InvalidArg(_) => 1,
            Io { .. } | BadMagic { .. } | UnsupportedVersion { .. } | Truncated { .. }
            | ShapeOverflow { .. } | Parse { .. } | UnknownSplit { .. } | DuplicateId { .. }
            | LabelMismatch { .. } | EmptyInput(_) | LabelOutOfRange { .. }
            | ConfigMismatch(_) => 2,
            ShapeMismatch { .. } | LengthMismatch { .. } | NonFinite(_) | ZeroMatrix
            | MissingAssignment | NonFiniteGradient { .. } | NotDifferentiable(_) => 3,
        }
    }
}
