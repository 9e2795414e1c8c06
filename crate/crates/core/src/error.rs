//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("empty input sequence")]
    EmptySequence,

    #[error("sequence length {len} exceeds max positions {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("empty target set: {0}")]
    EmptyTargetSet(String),

    #[error("target token sets overlap on token id {0}")]
    OverlappingTargets(u32),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("corrupt container: {0}")]
    CorruptContainer(String),

    #[error("missing tensor: {0}")]
    MissingTensor(String),

    #[error("tokenizer: {0}")]
    Tokenizer(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
