use thiserror::Error;

/// Errors raised by the solver, estimator and evaluation layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument fell outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration value violates its invariant.
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// The GP covariance could not be factorized even after nugget escalation.
    #[error("GP factorization failed{context}: {reason}")]
    Factorization { context: String, reason: String },

    /// Two artifacts (policy/config, or two evaluation results) do not match.
    #[error("incompatible artifacts: {0}")]
    Incompatible(String),

    /// An exact instance is too large to enumerate.
    #[error("size guard: {0}")]
    SizeGuard(String),

    #[error("empty input: {0}")]
    Empty(&'static str),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Attaches a time-step label to factorization failures; other variants pass through.
    pub fn at_step(self, t: usize, what: &str) -> Self {
        match self {
            Error::Factorization { reason, .. } => Error::Factorization {
                context: format!(" at t={t} ({what})"),
                reason,
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
