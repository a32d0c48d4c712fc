use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or arguments.
    #[error("config: {0}")]
    Config(String),

    /// Input data that cannot be used (empty corpus, malformed files, label problems).
    #[error("data: {0}")]
    Data(String),

    /// Model file or checkpoint that cannot be decoded.
    #[error("model file: {0}")]
    Format(String),

    /// Training diverged or produced non-finite values beyond the skip budget.
    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
