use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    /// A dimension did not have the size an operation requires.
    #[error("{op}: dimension mismatch on {axis} (expected {expected}, got {actual})")]
    Dimension {
        op: &'static str,
        axis: String,
        expected: String,
        actual: String,
    },
    /// Invalid operator configuration (kernel larger than input, heads not dividing width, ...).
    #[error("{op}: invalid configuration: {reason}")]
    Config { op: &'static str, reason: String },
    /// Invalid input values, e.g. class ids outside the logit range.
    #[error("{op}: invalid input: {reason}")]
    Input { op: &'static str, reason: String },
    /// API misuse such as a backward pass from a non-scalar.
    #[error("usage error: {0}")]
    Usage(String),
}

impl TensorError {
    pub(crate) fn dim(
        op: &'static str,
        axis: impl Into<String>,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        TensorError::Dimension {
            op,
            axis: axis.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn config(op: &'static str, reason: impl Into<String>) -> Self {
        TensorError::Config {
            op,
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
