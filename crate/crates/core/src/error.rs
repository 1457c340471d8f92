use std::path::PathBuf;

use crate::sparse::SolveStats;

/// Errors raised by the solver library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported spatial dimension {0} (expected 1 or 2)")]
    UnsupportedDimension(usize),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("linear solver did not converge after {} iterations (relative residual {:.3e})", .stats.iterations, .stats.relative_residual)]
    NonConvergence { stats: SolveStats },

    #[error("pointwise solve failed at t={t}, x={x:?}: {reason}")]
    Numerical { t: f64, x: Vec<f64>, reason: String },

    #[error("cannot read image {path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
