use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("domain error in `{kernel}`: input {value} at index {index} is outside the kernel's domain")]
    Domain {
        kernel: &'static str,
        index: usize,
        value: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("data error in {path}: {reason}")]
    Data { path: PathBuf, reason: String },

    /// Two parts of a run cannot work together, e.g. a regime and a model
    /// head layout, or reports with different evaluation sections.
    #[error("incompatible: {0}")]
    Incompatible(String),

    #[error("{0} already exists; pass --force to overwrite")]
    Exists(PathBuf),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
