//! Crate-wide error type.

/// Error type shared by all modules.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration value; the message names the offending key.
    #[error("configuration error: {0}")]
    Config(String),
    /// Invalid input to an operation (token out of range, malformed context).
    #[error("input error: {0}")]
    Input(String),
    /// An API contract was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),
    /// Loss or gradient went non-finite during training.
    #[error("non-finite value at step {step}: {what}")]
    NonFinite {
        step: usize,
        what: String,
        /// JSON dump of the offending batch, for post-mortem inspection.
        dump: String,
    },
    /// IO error.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    /// Serialization / parse error.
    #[error("parse error: {0}")]
    Parse(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
