//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("svd did not converge after {sweeps} sweeps on a {rows}x{cols} matrix")]
    SvdNonConvergence {
        rows: usize,
        cols: usize,
        sweeps: usize,
    },

    #[error("invalid rank {k}: at most {max} singular triplets are available")]
    InvalidRank { k: usize, max: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("unknown task id {0}")]
    UnknownTask(usize),

    #[error("empty value pool: percentile threshold needs at least one entry")]
    EmptyPool,

    #[error("matrix is not symmetric positive semi-definite")]
    NotPsd,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("config error: {0}")]
    ConfigValue(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
