use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite input to {0}")]
    NonFinite(&'static str),

    #[error("token id {id} outside vocabulary of size {vocab}")]
    Vocabulary { id: usize, vocab: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("context capacity exceeded: {needed} positions requested, maximum is {max}")]
    Capacity { needed: usize, max: usize },

    #[error("cross-entropy has no target positions (all ignored)")]
    EmptyLoss,

    #[error("parse error at byte offset {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("non-finite gradient at step {step} for parameter `{param}`")]
    NumericAbort { step: usize, param: String },

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}
