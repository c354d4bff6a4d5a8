use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corpus file {path} is not valid UTF-8 at byte offset {offset}")]
    InvalidUtf8 { path: PathBuf, offset: usize },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("offset {offset} collides with token id {max_id}")]
    OffsetCollision { offset: usize, max_id: usize },

    #[error("unknown order transform `{0}`")]
    UnknownTransform(String),

    #[error("unknown condition `{0}`")]
    UnknownCondition(String),

    #[error("held-out request of {requested} lines exceeds corpus size {available}")]
    HeldOutTooLarge { requested: usize, available: usize },

    #[error("dictionary is empty: {0}")]
    EmptyDictionary(String),

    #[error("vocabulary size {requested} is below the base alphabet size {base}")]
    VocabTooSmall { requested: usize, base: usize },

    #[error("surface `{0}` already carries the target prefix")]
    PrefixCollision(String),

    #[error("token id {id} out of range (vocabulary size {vocab_size})")]
    IdOutOfRange { id: usize, vocab_size: usize },

    #[error("sequence length {len} exceeds max_seq {max_seq}")]
    SequenceTooLong { len: usize, max_seq: usize },

    #[error("batch has no valid targets")]
    NoTargets,

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("output directory {0} is not empty; pass --resume to continue")]
    DirtyOutput(PathBuf),

    #[error("{requested} swaps exceed the {available} distinct transpositions")]
    TooManySwaps { requested: usize, available: usize },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
