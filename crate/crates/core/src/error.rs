use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    /// A zero embedding cannot be normalized; it usually means a dead network.
    #[error("row {row} has zero Euclidean norm")]
    ZeroNormRow { row: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward needs a scalar loss of shape [1], got {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("variable was not recorded on this tape")]
    ForeignVar,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid model spec: {0}")]
    Spec(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    PayloadLength { expected: u64, found: u64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("linear solve failed: {0}")]
    Solver(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("representation collapse: {0}")]
    Collapse(String),

    #[error("empty input: {0}")]
    Empty(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
