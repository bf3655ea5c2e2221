use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A matrix that must be positive definite is not, or a factorization broke down.
    #[error("numerical domain error: {0}")]
    NumericalDomain(String),

    #[error("degenerate normalization: {0}")]
    NormalizationDegenerate(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NumericalDomain(_) | Error::Divergence { .. } | Error::NormalizationDegenerate(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
