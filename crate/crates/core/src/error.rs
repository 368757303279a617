use thiserror::Error;

use crate::field::FieldError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("non-finite value after step {step} (sigma = {sigma})")]
    NonFinite { step: usize, sigma: f64 },
    #[error("statistics descent diverged at step {step}: err {err:.3e} after {iterations} iterations")]
    Diverged {
        step: usize,
        err: f64,
        iterations: usize,
    },
    #[error("did not converge: {0}")]
    NotConverged(String),
    #[error("denoiser failed: {0}")]
    Denoiser(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}

impl Error {
    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Field(_) => "field",
            Error::Invalid(_) => "invalid",
            Error::DimMismatch(_) => "dim_mismatch",
            Error::Degenerate(_) => "degenerate",
            Error::NonFinite { .. } => "non_finite",
            Error::Diverged { .. } => "diverged",
            Error::NotConverged(_) => "not_converged",
            Error::Denoiser(_) => "denoiser",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// Process exit code: 2 for rejected input, 3 for runtime failures and
    /// 4 when an optimizer gives up.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Field(_) | Error::Invalid(_) | Error::DimMismatch(_) | Error::Format(_) | Error::Json(_) => 2,
            Error::Diverged { .. } | Error::NotConverged(_) => 4,
            Error::Degenerate(_) | Error::NonFinite { .. } | Error::Denoiser(_) | Error::Io(_) => 3,
        }
    }
}
