use std::path::PathBuf;

/// Errors produced across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("rejected input: {0}")]
    RejectedInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("training diverged at {context}: loss = {loss}")]
    Diverged { context: String, loss: f64 },

    #[error("bad file format in {path:?}: {reason}")]
    Format { path: Option<PathBuf>, reason: String },

    #[error("missing scenes for accepted ids: {0:?}")]
    MissingScenes(Vec<String>),

    #[error("not found: {0}")]
    NotFound(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(reason: impl Into<String>) -> Self {
        Error::Format { path: None, reason: reason.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
