use std::path::PathBuf;

/// Errors surfaced by every subsystem. Contract violations indicate caller
/// bugs (shape mismatches, out-of-range ids); the rest are recoverable
/// input/IO conditions.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?} ({context})")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
        context: String,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("audio input too short: {got} samples, need at least {need}")]
    AudioTooShort { got: usize, need: usize },

    #[error("malformed wav file {path}: {reason}")]
    MalformedWav { path: PathBuf, reason: String },

    #[error("unsupported wav encoding in {path}: {reason}")]
    UnsupportedWav { path: PathBuf, reason: String },

    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    #[error("sequence too long: {got} > maximum {max} ({context})")]
    TooLong {
        got: usize,
        max: usize,
        context: String,
    },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("stage dependency not satisfied: {0}")]
    StageDependency(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
