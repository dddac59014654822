//! Error type shared across the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{what}: index {index} out of range for length {len}{}", position.map(|p| format!(" at position {p}")).unwrap_or_default())]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
        position: Option<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid alignment: {0}")]
    Alignment(String),

    #[error("input too short: {frames} raw frames, need at least {needed} for one chunk")]
    InputTooShort { frames: usize, needed: usize },

    #[error("decode context full: {len} items at configured maximum {max}")]
    ContextFull { len: usize, max: usize },

    #[error("stream session: {0}")]
    Session(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("parse error in {what}: {detail}")]
    Parse { what: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
