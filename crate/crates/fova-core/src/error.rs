use thiserror::Error;

/// Errors raised by construction and validation of core types and operations.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration values (sizes, discount factors, ranges).
    #[error("configuration error: {0}")]
    Config(String),

    /// Structurally incompatible arguments (shape mismatches, empty inputs).
    #[error("argument error: {0}")]
    Argument(String),

    /// Inputs outside an operation's mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
