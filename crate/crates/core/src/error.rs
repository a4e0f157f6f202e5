use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    DimensionMismatch {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("invalid value for `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("row {row} has zero norm")]
    ZeroNormRow { row: usize },

    #[error("bag is empty")]
    EmptyBag,

    #[error("{path}: bad magic bytes (expected {expected:?})")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("{path}: unsupported format version {found} (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: truncated file (expected {expected} bytes, found {found})")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}: embedding width {found} does not match dataset width {expected}")]
    InconsistentDim {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("unknown stain {0}")]
    UnknownStain(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("optimal transport did not converge: marginal violation {residual:.3e} after {iterations} iterations")]
    NotConverged { residual: f64, iterations: usize },

    #[error("class {class} has {found} examples, needs at least {needed}")]
    InsufficientClass {
        class: usize,
        found: usize,
        needed: usize,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("fewer than two classes available")]
    SingleClass,

    #[error("no observed events")]
    NoEvents,

    #[error("no comparable pairs")]
    NoComparablePairs,

    #[error("{method} did not converge: residual {residual:.3e} after {iterations} iterations")]
    SolverNotConverged {
        method: &'static str,
        residual: f64,
        iterations: usize,
    },

    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: usize },

    #[error("non-finite gradient in parameter block `{0}`")]
    NonFiniteGradient(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dims(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        Error::DimensionMismatch {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
