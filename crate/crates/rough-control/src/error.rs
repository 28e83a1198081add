//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by solvers, samplers and the experiment harness.
#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("non-finite value at step {step}: {context}")]
    NumericalOverflow { step: usize, context: String },
    #[error("state left the computational domain: {0}")]
    OutOfDomain(String),
    #[error("resolution limit exceeded: {0}")]
    Resolution(String),
    #[error("finite-time escape at t = {t}: |P| = {norm:e}")]
    FiniteEscape { t: f64, norm: f64 },
    #[error("run aborted: {failed} of {total} paths failed")]
    AbortedRun { failed: usize, total: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Attach a step index to a bare overflow error.
    pub fn at_step(self, step: usize) -> Self {
        match self {
            Error::NumericalOverflow { context, .. } => Error::NumericalOverflow { step, context },
            other => other,
        }
    }
}
