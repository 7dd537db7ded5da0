use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("fields live on different grids")]
    GridMismatch,

    #[error("eigensolver failed: {0}")]
    Eigensolver(String),

    #[error("first Stokes eigenvalue is {0}, expected a positive value")]
    NonPositiveEigenvalue(f64),

    #[error("basis too small: lambda = {lambda} but largest retained eigenvalue is {tau_max}")]
    BasisTooSmall { lambda: f64, tau_max: f64 },

    #[error("spectral degeneracy at lambda = {lambda}: smallest Gram eigenvalue {lambda_min} over N = {n_modes} modes")]
    SpectralDegeneracy {
        lambda: f64,
        n_modes: usize,
        lambda_min: f64,
    },

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },

    #[error("blow-up at t = {t}: |X_{index}| = {value:e}")]
    BlowUp { t: f64, index: usize, value: f64 },

    #[error("bound violated on interval n = {n}: {bound} (measured {measured:e}, allowed {allowed:e})")]
    BoundViolated {
        n: usize,
        bound: String,
        measured: f64,
        allowed: f64,
    },

    #[error("2T stabilization failed for start offset s = {offset}: relative norm {relative:e}")]
    TwoTFailed { offset: f64, relative: f64 },

    #[error("not enough points for a fit: {0}")]
    InsufficientPoints(String),

    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("basis cache {path}: {reason}")]
    Cache { path: PathBuf, reason: String },

    #[error("malformed artifact: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag used in the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidDomain(_) => "invalid_domain",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::GridMismatch => "grid_mismatch",
            Error::Eigensolver(_) => "eigensolver",
            Error::NonPositiveEigenvalue(_) => "non_positive_eigenvalue",
            Error::BasisTooSmall { .. } => "basis_too_small",
            Error::SpectralDegeneracy { .. } => "spectral_degeneracy",
            Error::InvalidArgument { .. } => "invalid_argument",
            Error::NonFinite { .. } => "non_finite",
            Error::BlowUp { .. } => "blow_up",
            Error::BoundViolated { .. } => "bound_violated",
            Error::TwoTFailed { .. } => "two_t_failed",
            Error::InsufficientPoints(_) => "insufficient_points",
            Error::Config { .. } => "config",
            Error::Cache { .. } => "cache",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn arg(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }
}
