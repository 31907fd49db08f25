use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("tensor backend: {0}")]
    Backend(#[from] candle_core::Error),

    #[error("topology: {0}")]
    Topology(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty support: {0}")]
    EmptySupport(String),

    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("annotation {path}: {reason}")]
    Annotation { path: String, reason: String },

    #[error("non-finite loss at step {step} (batch ids: {batch_ids:?})")]
    NonFiniteLoss { step: usize, batch_ids: Vec<String> },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("manifest: {0}")]
    Manifest(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
