//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates its documented invariant.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Input data is malformed, inconsistent, or missing a required piece.
    #[error("data error: {0}")]
    Data(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A tape node produced a NaN or infinity during the forward pass.
    #[error("non-finite value at tape node {node}")]
    NonFinite { node: usize },

    #[error("backward requires a scalar (1x1) output, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },

    #[error("non-positive scale {0}")]
    NonPositiveScale(f64),

    /// Numerical failure with the name of the offending quantity.
    #[error("numerical failure in {term}: {detail}")]
    Numerical { term: String, detail: String },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn numerical(term: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            term: term.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Data(_) | Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::Shape(_) => 2,
            Error::NonFinite { .. }
            | Error::NotScalar { .. }
            | Error::NonPositiveScale(_)
            | Error::Numerical { .. }
            | Error::NotPositiveDefinite => 3,
        }
    }
}
