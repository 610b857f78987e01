//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A file could not be read or written.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A CSV file does not match the expected schema.
    #[error("schema error in {path}: {message}")]
    Schema { path: String, message: String },

    /// Input data violates a dataset invariant.
    #[error("invalid data{}: {message}", context_suffix(.context))]
    Validation {
        message: String,
        context: Option<String>,
    },

    /// A configuration value is out of range or inconsistent.
    #[error("invalid config: {0}")]
    Config(String),

    /// A design matrix block is rank deficient or otherwise unusable.
    #[error("degenerate design in block {block}: {message}")]
    DegenerateDesign { block: String, message: String },

    /// A linear algebra routine failed (non-SPD matrix, singular system, ...).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// An iterative optimizer exhausted its restarts. Carries the best
    /// objective value seen so the caller can decide whether to proceed.
    #[error("optimizer failed to converge (best objective {best_objective})")]
    NonConvergence { best_objective: f64 },
}

impl Error {
    pub fn validation(message: impl Into<String>) -> Self {
        Error::Validation {
            message: message.into(),
            context: None,
        }
    }

    pub fn validation_at(message: impl Into<String>, context: impl Into<String>) -> Self {
        Error::Validation {
            message: message.into(),
            context: Some(context.into()),
        }
    }
}

fn context_suffix(context: &Option<String>) -> String {
    match context {
        Some(c) => format!(" ({c})"),
        None => String::new(),
    }
}
