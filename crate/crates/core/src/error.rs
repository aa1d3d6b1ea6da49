//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the numerical library.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value (bad shape, bad hyperparameter, ...).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A solver failed to produce a usable result (blow-up, non-finite
    /// values, iteration cap reached, ...).
    #[error("solver failure: {0}")]
    Solver(String),

    /// Training diverged or produced non-finite losses.
    #[error("training failure: {0}")]
    Training(String),

    /// A file or artifact was malformed or missing.
    #[error("artifact error: {0}")]
    Artifact(String),

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
