use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("numeric domain error: {0}")]
    Domain(String),

    #[error("index {index} out of range for table of {size} rows")]
    Gather { index: usize, size: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("tape already consumed by a previous backward pass")]
    TapeReused,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate class distribution: {0}")]
    Degenerate(String),

    #[error("cannot stratify: {0}")]
    Stratification(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("training diverged: {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
