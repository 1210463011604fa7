//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A documented precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input data (files, images, manifests) failed validation.
    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    /// A loss could not be evaluated (e.g. empty mask).
    #[error("loss undefined: {0}")]
    LossUndefined(String),

    /// A metric could not be evaluated (e.g. mask empty after erosion).
    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    /// Training produced a non-finite value; names the first offending term.
    #[error("non-finite loss at step {step}: first non-finite term `{term}`")]
    NonFinite { step: u64, term: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn invalid_data(msg: impl Into<String>) -> Self {
        Error::InvalidData(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
