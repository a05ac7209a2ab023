use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("corrupted data: {0}")]
    Corruption(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("missing gradient: {0}")]
    MissingGradient(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("training complete at epoch {0}")]
    TrainingComplete(usize),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
