//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("parse failure at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("no complete cases present")]
    NoCompleteCases,

    #[error("invalid term `{term}`: {message}")]
    Term { term: String, message: String },

    #[error("pattern {pattern}: {message}")]
    Spec { pattern: String, message: String },

    #[error("pattern {pattern}: empty arm in pairwise subset ({message})")]
    EmptyArm { pattern: String, message: String },

    #[error(
        "pattern {pattern}: complete separation detected (coefficient on `{term}` diverged beyond the log-odds bound)"
    )]
    Separation { pattern: String, term: String },

    #[error("singular matrix in {context}; consider simplifying the design or retrying with a ridge penalty")]
    Singular { context: String },

    #[error("rank-deficient {context}")]
    RankDeficient { context: String },

    #[error("{context} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        context: String,
        iterations: usize,
        residual: f64,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("variable `{0}` required but missing in row")]
    MissingValue(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("enumeration over {cells} cells exceeds the cap of {cap}")]
    EnumerationCap { cells: u128, cap: u128 },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{failed} of {total} replicates failed")]
    TooManyFailures { failed: usize, total: usize },
}

impl Error {
    /// True for failures of the numerics (as opposed to bad input or configuration).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Separation { .. }
                | Error::Singular { .. }
                | Error::RankDeficient { .. }
                | Error::NoConvergence { .. }
                | Error::NonFinite(_)
                | Error::TooManyFailures { .. }
                | Error::EmptyArm { .. }
        )
    }
}
