use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("citation marker [{marker}] is outside the valid range 1..={n_docs}")]
    OutOfRangeMarker { marker: i64, n_docs: usize },

    #[error("malformed citation marker `{0}`")]
    MalformedMarker(String),

    #[error("unknown token `{0}`")]
    UnknownSurfaceToken(String),

    #[error("token id {id} is outside the vocabulary of size {vocab_size}")]
    UnknownToken { id: usize, vocab_size: usize },

    #[error("requested {requested} fact tokens but the fact band only holds {available}")]
    VocabularyExhausted { requested: usize, available: usize },

    #[error("invalid example: {0}")]
    InvalidExample(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("document {0} has no tokens")]
    EmptyDocument(usize),

    #[error("citation marker {marker} has no contextual embedding (set holds {available})")]
    UnknownMarker { marker: usize, available: usize },

    #[error("citation set is empty")]
    EmptyCitationSet,

    #[error("marker {marker} is outside 1..={n}")]
    MarkerOutOfRange { marker: usize, n: usize },

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("non-finite input to {0}")]
    NonFiniteInput(&'static str),

    #[error("non-finite loss{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFiniteLoss { step: Option<usize> },

    #[error("zero-norm vector in cosine score between positions {query} and {key}")]
    ZeroNorm { query: usize, key: usize },

    #[error("attention pair ({query}, {key}) is not causal or is out of bounds")]
    NonCausalPair { query: usize, key: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
