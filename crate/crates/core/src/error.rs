use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: String,
        got: String,
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("ensemble of size {m} is too small (need at least 2 members)")]
    InsufficientEnsemble { m: usize },
    #[error("invalid model: {0}")]
    ModelValidation(String),
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("unsupported filter variant: {0}")]
    UnsupportedVariant(String),
    #[error("non-finite state at step {step}")]
    Explosion { step: usize },
    #[error("numerical failure at step {step}: {reason}")]
    NumericalFailure { step: usize, reason: String },
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Dimension {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// True for failures raised while integrating (as opposed to bad inputs).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Explosion { .. } | Error::NumericalFailure { .. })
    }
}
