//! Crate-wide error type.

use std::path::PathBuf;

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by any pipeline stage.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {message}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: missing field `{field}`")]
    MissingField {
        path: PathBuf,
        line: usize,
        field: String,
    },

    #[error("duplicate instance id `{id}`")]
    DuplicateId { id: String },

    #[error("split is empty, statistic undefined")]
    EmptySplit,

    #[error("question must contain exactly one placeholder marker, found {found}")]
    Placeholder { found: usize },

    #[error("candidate string is empty")]
    EmptyCandidate,

    #[error("chunk budget must be >= 1, got {budget}")]
    ChunkBudget { budget: usize },

    #[error("chunk stride must be in [1, budget={budget}], got {stride}")]
    ChunkStride { stride: usize, budget: usize },

    #[error("question-answer prefix ({prefix} tokens) leaves no passage room within max_len {max_len}")]
    OversizeQuestion { prefix: usize, max_len: usize },

    #[error("input of {len} tokens exceeds model maximum of {max}")]
    OversizeInput { len: usize, max: usize },

    #[error("token id {id} outside vocabulary of size {vocab}")]
    VocabId { id: u32, vocab: usize },

    #[error("input has no mask position set (or it does not point at a MASK token)")]
    MaskPosition,

    #[error("instance `{id}` has no gold label")]
    MissingGold { id: String },

    #[error("requested {requested} negatives but only {eligible} eligible vocabulary tokens")]
    NotEnoughNegatives { requested: usize, eligible: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("prediction/split mismatch: {0}")]
    Mismatch(String),

    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training aborted: {0}")]
    Training(String),
}

impl Error {
    /// Coarse category tag, used by front ends to prefix messages.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MalformedRecord { .. }
            | Error::MissingField { .. }
            | Error::DuplicateId { .. }
            | Error::EmptySplit
            | Error::Mismatch(_) => "data",
            Error::Placeholder { .. } | Error::EmptyCandidate => "instance",
            Error::ChunkBudget { .. }
            | Error::ChunkStride { .. }
            | Error::OversizeQuestion { .. }
            | Error::OversizeInput { .. }
            | Error::InvalidParameter(_) => "config",
            Error::VocabId { .. } | Error::MaskPosition | Error::Tokenizer(_) => "tokenizer",
            Error::MissingGold { .. } | Error::NotEnoughNegatives { .. } => "augment",
            Error::Checkpoint(_) => "checkpoint",
            Error::Training(_) => "training",
        }
    }
}
