//! Crate-wide error type. Variants separate caller mistakes (Config, Input,
//! Usage) from data problems (Ingest), numeric failure states (Numeric),
//! structural violations during architecture edits (Structure), and bugs
//! (Internal).

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed runtime input (shapes, missing targets, bad ids).
    #[error("input error: {0}")]
    Input(String),

    /// NaN/Inf or other numeric failure detected.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// API misuse (wrong call order, wrong mode for an operation).
    #[error("usage error: {0}")]
    Usage(String),

    /// External data could not be ingested (bad magic, truncation, counts).
    #[error("ingest error: {0}")]
    Ingest(String),

    /// A structural edit would leave the model inconsistent.
    #[error("structure error: {0}")]
    Structure(String),

    /// Invariant breach that indicates a bug in this crate.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
    pub fn ingest(msg: impl Into<String>) -> Self {
        Error::Ingest(msg.into())
    }
    pub fn structure(msg: impl Into<String>) -> Self {
        Error::Structure(msg.into())
    }
    pub fn internal(msg: impl Into<String>) -> Self {
        Error::Internal(msg.into())
    }
}
