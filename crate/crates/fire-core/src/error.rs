//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FireError {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("{op}: produced non-finite values")]
    NonFinite { op: &'static str },

    #[error("non-finite loss component `{component}` at iteration {iteration}")]
    NonFiniteLoss { component: String, iteration: u64 },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("{path}: {reason}")]
    Format { path: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl FireError {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        FireError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        FireError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for failures of numerical origin rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            FireError::NonFinite { .. } | FireError::NonFiniteLoss { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, FireError>;
