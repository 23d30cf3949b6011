use num_complex::Complex64;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("envelope returned non-finite value {value} at entry ({i}, {j}) for kernel value x = {x}")]
    Evaluation { i: usize, j: usize, x: f64, value: f64 },

    #[error("capability unavailable: {0}")]
    Capability(String),

    #[error("eigensolver failed to converge for {provenance}")]
    Eigensolver { provenance: String },

    #[error("fixed-point solver did not converge at z = {z} (last residual {residual:e})")]
    Solver { z: Complex64, residual: f64 },

    #[error(
        "Hankel determinant det M_{order} = {det:e} is degenerate: measure supported on fewer than {points} points or moments inconsistent"
    )]
    Degenerate { order: usize, det: f64, points: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for errors caused by bad input rather than numerical failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_) | Error::Capability(_) | Error::Config(_) | Error::Io(_)
        )
    }
}
