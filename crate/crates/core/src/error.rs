use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("mask state: {0}")]
    MaskState(String),

    #[error("noise schedule: {0}")]
    Schedule(String),

    #[error("vocabulary: {0}")]
    Vocabulary(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Training { step: usize, loss: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("harness: {0}")]
    Harness(String),

    #[error("usage: {0}")]
    Usage(String),
    /// Help or version text requested on the command line.
    #[error("{0}")]
    Help(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
