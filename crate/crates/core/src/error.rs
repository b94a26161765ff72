use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor did not have the extent the operation requires along `axis`.
    #[error("{op}: dimension mismatch on axis `{axis}`: expected {expected}, got {actual}")]
    Dim {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// An operation that is only legal while training was called in evaluation mode.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dataset: {0}")]
    Data(String),

    #[error("{path}: {msg}")]
    File { path: PathBuf, msg: String },

    #[error("non-finite loss at step {step} (batch windows {batch:?})")]
    NonFinite { step: usize, batch: Vec<String> },

    #[error("AUC undefined: {0}")]
    SingleClass(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn dim(op: &'static str, axis: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dim {
            op,
            axis,
            expected,
            actual,
        }
    }

    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            op,
            msg: msg.into(),
        }
    }

    pub fn file(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        Error::File {
            path: path.into(),
            msg: msg.to_string(),
        }
    }

    /// True for failures caused by user data or configuration rather than numerics or IO.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Dim { .. }
                | Error::Shape { .. }
                | Error::Config(_)
                | Error::Data(_)
                | Error::File { .. }
                | Error::SingleClass(_)
                | Error::Checkpoint(_)
                | Error::Contract(_)
        )
    }
}
