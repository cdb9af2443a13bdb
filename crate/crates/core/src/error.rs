use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error in {op}: {reason}")]
    Domain { op: &'static str, reason: String },

    /// A simulation or model configuration is inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed input data (grids, lists, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// An iterative numerical routine ran out of budget.
    #[error("{op} did not converge: {reason}")]
    NonConvergence { op: &'static str, reason: String },

    /// A simulated positive quantity changed sign.
    #[error("sign loss at step {step}: {what}")]
    SignLoss { step: usize, what: &'static str },
}

impl Error {
    pub(crate) fn domain(op: &'static str, reason: impl Into<String>) -> Self {
        Error::Domain {
            op,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
