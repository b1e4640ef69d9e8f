use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left} and {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("matrix is not positive definite: pivot {pivot} is non-positive after {attempts} jitter attempts")]
    NotPositiveDefinite { pivot: usize, attempts: usize },

    #[error("matrix is not positive definite under fixed-point quantization: pivot {pivot} is non-positive")]
    NotPositiveDefiniteQuantized { pivot: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("non-finite value at parameter index {index}")]
    NonFinite { index: usize },

    #[error("invalid state: {0}")]
    State(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: impl Into<String>, right: impl Into<String>) -> Self {
        Error::Shape {
            op,
            left: left.into(),
            right: right.into(),
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
