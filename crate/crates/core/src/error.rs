//! Error taxonomy shared by every module.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid argument or configuration value.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Array dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Dataset or manifest content problem.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite value where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Model parameters unusable (untrained, NaN, wrong config).
    #[error("model error: {0}")]
    Model(String),

    /// Checkpoint serialization problem.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Scene synthesis could not satisfy placement constraints.
    #[error("generation error: {0}")]
    Generation(String),

    /// Heterogeneous batch contents.
    #[error("batch error: {0}")]
    Batch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
