//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: usize, vocab_size: usize },

    #[error("sequence length {len} not in 1..={max}")]
    SequenceLength { len: usize, max: usize },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("tensor `{0}` contains a non-finite entry")]
    NonFinite(String),

    #[error("malformed document: {0}")]
    Malformed(String),

    #[error("unsupported format_version {0}")]
    FormatVersion(u32),

    #[error("unknown node `{0}`")]
    UnknownNode(String),

    #[error("channel `{channel}` is not legal for destination `{dst}`")]
    IllegalChannel { dst: String, channel: String },

    #[error("edge `{0}`: source is not upstream of destination")]
    NotUpstream(String),

    #[error("duplicate edge `{0}`")]
    DuplicateEdge(String),

    #[error("circuit was built for config {circuit}, model config hashes to {model}")]
    ConfigHashMismatch { circuit: String, model: String },

    #[error("clean and corrupt inputs differ in length ({clean} vs {corrupt})")]
    LengthMismatch { clean: usize, corrupt: usize },

    #[error("pair {index}: {source}")]
    Pair {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("distribution: {0}")]
    Distribution(String),

    #[error("argument out of range: {0}")]
    Range(String),

    #[error("insufficient samples: need rank {rank} but only {n} samples")]
    InsufficientSamples { rank: usize, n: usize },

    #[error("degenerate distribution: {0}")]
    Degenerate(String),

    #[error("unknown word `{0}`")]
    UnknownWord(String),

    #[error("template `{template}`: {reason}")]
    Template { template: String, reason: String },

    #[error("matched pairing produced no pairs")]
    EmptyJoin,

    #[error("unknown field `{0}`")]
    UnknownField(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from user-supplied configuration rather than
    /// from the data being processed.
    pub fn is_config_error(&self) -> bool {
        match self {
            Error::InvalidConfig(_)
            | Error::Range(_)
            | Error::UnknownField(_)
            | Error::Io { .. } => true,
            Error::Pair { source, .. } => source.is_config_error(),
            _ => false,
        }
    }
}
