use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a shape or indexing contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An argument was outside its mathematical domain (e.g. a non-positive variance).
    #[error("domain error: {0}")]
    Domain(String),

    /// Cholesky failed even after the maximum jitter was added.
    #[error(
        "matrix not positive definite: leading minor {minor} of {dim} failed (jitter {jitter:e})"
    )]
    NotPositiveDefinite {
        minor: usize,
        dim: usize,
        jitter: f64,
    },

    /// Some other numerical failure, with a description of the offending term.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A candidate query does not fit the remaining budget.
    #[error("budget violation: cost {cost} exceeds remaining budget {remaining}")]
    BudgetViolation { cost: String, remaining: String },

    /// The input optimizer could not evaluate the objective.
    #[error("optimizer failure: {0}")]
    Optimizer(String),

    /// Exhaustive enumeration would be too large.
    #[error("search space too large: {0}")]
    SearchTooLarge(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }
}
