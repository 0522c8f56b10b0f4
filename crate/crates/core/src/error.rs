use thiserror::Error;

/// Errors raised across the adaptation stack.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A configuration value is out of range or inconsistent.
    #[error("invalid configuration for `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// Array shapes do not line up.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: String,
        actual: String,
    },

    /// A numeric routine produced NaN/Inf or failed to factorize.
    #[error("numerical failure in {context}: {detail}")]
    Numerical {
        context: &'static str,
        detail: String,
    },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input carries no usable information (e.g. all-zero likelihoods).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// OOD scores requested before any GMM class has been initialized.
    #[error("no GMM class initialized yet")]
    Uninitialized,

    /// Source pretraining could not fit the synthetic scenario.
    #[error("scenario too hard: source model reached only {accuracy:.3} train accuracy")]
    ScenarioTooHard { accuracy: f64 },

    /// Filesystem or serialization failure.
    #[error("i/o: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn dim(
        context: &'static str,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::Dimension {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn numerical(context: &'static str, detail: impl Into<String>) -> Self {
        Error::Numerical {
            context,
            detail: detail.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
