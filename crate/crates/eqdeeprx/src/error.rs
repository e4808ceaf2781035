//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by simulation, receiver processing and training.
#[derive(Debug, Error)]
pub enum Error {
    /// Mismatched or otherwise invalid tensor/matrix dimensions.
    #[error("shape error: {0}")]
    Shape(String),

    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// A numerical routine failed (singular system, residual too large, ...).
    #[error("numerical failure: {0}")]
    Numeric(String),

    /// A NaN or infinity appeared where the pipeline requires finite values.
    #[error("non-finite value at stage `{stage}`")]
    NonFinite { stage: &'static str },

    /// Malformed configuration file or option combination.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed checkpoint or slot-dump container.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
