//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the fitting engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model specification (unknown family/variant, bad combination,
    /// empty response list, unresolved column names).
    #[error("invalid model specification: {0}")]
    Spec(String),

    /// Invalid or inconsistent data (non-integer counts, rank-deficient
    /// design, too few subjects).
    #[error("invalid data: {0}")]
    Data(String),

    /// Parameter outside its domain (nonpositive mean/dispersion/sd, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A numerical routine failed to converge or produced non-finite values.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Configuration file or CLI argument problem.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 for numerical failures, 2 for
    /// usage/configuration/data errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 1,
            _ => 2,
        }
    }
}
