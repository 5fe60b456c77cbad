use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MspError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MspError {
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("{0}: input contains no points")]
    EmptyInput(PathBuf),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    #[error("degenerate target: {0}")]
    DegenerateTarget(String),

    #[error("degenerate probe: {0}")]
    DegenerateProbe(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("k-NN search over an empty key set")]
    EmptyKeys,

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
}

impl MspError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MspError::Io { path: path.into(), source }
    }

    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        MspError::Shape { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }
}
