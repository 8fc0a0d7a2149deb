//! Error type shared by every module.

use thiserror::Error;

/// Coarse grouping used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Numeric,
    Io,
}

#[derive(Debug, Error)]
pub enum AgmError {
    #[error("time {t} is at or beyond the singular endpoint")]
    SingularTime { t: f64 },
    #[error("diffusion coefficient vanishes at t={t}")]
    ZeroDiffusion { t: f64 },
    #[error(
        "covariance not positive definite{}: eigenvalues ({:e}, {:e})",
        .t.map(|t| format!(" at t={t}")).unwrap_or_default(),
        .eigenvalues[0],
        .eigenvalues[1]
    )]
    NotPositiveDefinite { t: Option<f64>, eigenvalues: [f64; 2] },
    #[error("singular covariance (determinant {det:e})")]
    SingularCovariance { det: f64 },
    #[error("sampling hop unavailable at t={t}: denominator {denominator:e}")]
    HopUnavailable { t: f64, denominator: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl AgmError {
    pub fn class(&self) -> ErrorClass {
        match self {
            AgmError::Config(_) | AgmError::Shape(_) => ErrorClass::Config,
            AgmError::Io(_) | AgmError::Parse { .. } => ErrorClass::Io,
            _ => ErrorClass::Numeric,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        AgmError::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, AgmError>;
