use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("degenerate dimension in {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("kernel size must be odd, got {0}")]
    KernelSize(usize),

    #[error("token id {id} outside vocabulary of size {size}")]
    Vocabulary { id: usize, size: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    Rank(Vec<usize>),

    #[error("empty sequence passed to {0}")]
    Length(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value produced by {op} at index {index}")]
    NonFinite { op: String, index: usize },

    #[error("gradient check failed at coordinate {index}: {detail}")]
    GradCheck { index: usize, detail: String },

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },

    #[error("cannot resolve {what} for {id}: {path}")]
    Resolution {
        what: &'static str,
        id: String,
        path: PathBuf,
    },

    #[error("alignment error: {golds} gold vs {preds} predicted utterances")]
    Alignment { golds: usize, preds: usize },

    #[error("undefined reference: {0}")]
    UndefinedReference(&'static str),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("pipeline error in {pass}: {detail}")]
    Pipeline { pass: &'static str, detail: String },

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("frozen parameter drift in {0}")]
    FrozenDrift(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
