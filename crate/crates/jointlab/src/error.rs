//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input data or configuration.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// A parameter vector violates its constraints (e.g. non-PD covariance).
    #[error("parameter error: {0}")]
    Parameter(String),

    /// An error attributable to one subject's data.
    #[error("subject {id}: {msg}")]
    Subject { id: String, msg: String },

    /// Numerical failure (underflow, non-finite intermediate) for one subject.
    #[error("numeric failure for subject {id}: {msg}")]
    Numeric { id: String, msg: String },

    /// An iterative procedure exhausted its budget.
    #[error("did not converge: {0}")]
    NonConvergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attach a subject id to an error that lacks one.
    pub fn for_subject(self, id: &str) -> Error {
        match self {
            Error::Subject { .. } | Error::Numeric { .. } => self,
            other => Error::Subject {
                id: id.to_string(),
                msg: other.to_string(),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
