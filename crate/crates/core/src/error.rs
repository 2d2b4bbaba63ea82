use std::path::PathBuf;

use thiserror::Error;

use crate::backend::BackendError;

/// Errors surfaced by pipeline stages and their building blocks.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("asset store error: {0}")]
    Store(String),

    #[error("run manifest error: {0}")]
    Manifest(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl PipelineError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;
