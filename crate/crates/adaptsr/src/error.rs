//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error enum.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range or inconsistent.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Array shapes do not compose.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An operation was called in the wrong adapter/model state
    /// (e.g. merging an already-merged adapter).
    #[error("invalid state: {0}")]
    State(String),

    /// A target preset or pattern did not resolve against the registry.
    #[error("target resolution failed: {0}")]
    TargetResolution(String),

    /// A checkpoint file does not match the model it is loaded into.
    #[error("checkpoint incompatible: {0}")]
    CheckpointIncompatible(String),

    /// A checkpoint or data file is malformed.
    #[error("malformed file: {0}")]
    MalformedFile(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("config parse error: {0}")]
    ConfigParse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid_config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }
}
