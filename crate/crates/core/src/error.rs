use std::path::PathBuf;

use thiserror::Error;

use crate::attention::AttentionMode;
use crate::schedules::ConfigError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid chunk config: {0}")]
    Config(#[from] ConfigError),

    #[error("degenerate input: {0}")]
    Degenerate(&'static str),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("attention mode {0:?} requires a chunk config")]
    MissingChunkConfig(AttentionMode),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("no attended keys")]
    NoAttendedKeys,

    #[error("invalid model config: {0}")]
    ModelConfig(String),

    #[error("corpus too short: {len} bytes, need more than {needed}")]
    CorpusTooShort { len: usize, needed: usize },

    #[error("insufficient tokens: have {have}, need at least {need}")]
    InsufficientTokens { have: usize, need: usize },

    #[error("passkey length too small: {total_len} tokens, template alone needs {needed}")]
    PasskeyTooShort { total_len: usize, needed: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint: bad magic")]
    BadMagic,

    #[error("checkpoint: version mismatch (found {found}, expected {expected})")]
    VersionMismatch { found: u8, expected: u8 },

    #[error("checkpoint: truncated")]
    Truncated,

    #[error("checkpoint: {0}")]
    CorruptCheckpoint(String),

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
}
