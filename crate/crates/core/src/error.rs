use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ApeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ApeError {
    #[error("dimension mismatch: {op} of {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("passage {passage} is already encoded through all {layers} layers")]
    AlreadyComplete { passage: usize, layers: usize },

    #[error("parse error at line {line}, byte offset {offset}: {message}")]
    Parse {
        line: usize,
        offset: usize,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing checkpoint: {}", .0.display())]
    MissingCheckpoint(PathBuf),

    #[error("stale episode: sampled under params {sampled:016x}, current params {current:016x}")]
    StaleEpisode { sampled: u64, current: u64 },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ApeError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ApeError::Io {
            path: path.into(),
            source,
        }
    }
}
