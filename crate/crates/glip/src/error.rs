use thiserror::Error;

/// Errors surfaced by tensor ops, the tape, data I/O, and the trainer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite values produced by `{0}`")]
    NonFinite(&'static str),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGrad(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("tape already consumed by a backward pass")]
    TapeConsumed,

    #[error("variable does not belong to this tape")]
    ForeignVar,

    #[error("mask ratio class unreachable after {0} attempts")]
    MaskRatio(usize),

    #[error("checkpoint/config mismatch: {0}")]
    Mismatch(String),

    #[error("unsupported or corrupt file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
