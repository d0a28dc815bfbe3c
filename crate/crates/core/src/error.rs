use thiserror::Error;

use crate::gp::Hyper;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("probability {0} outside (0, 1)")]
    Probability(f64),
    #[error("non-finite argument h={h}, a={a}")]
    NonFinite { h: f64, a: f64 },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Domain(#[from] DomainError),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("cholesky failed with jitter {jitter:e} (t={t}, max diag {max_diag:e})")]
    Cholesky { jitter: f64, t: usize, max_diag: f64 },

    #[error("negative predictive variance {0:e}")]
    NegativeVariance(f64),

    #[error("MAP estimation failed at every start")]
    MapFailed { best: Box<Hyper> },

    #[error("sampler: {0}")]
    Sampler(String),

    #[error("integration scheme has no positive weight")]
    DegenerateScheme,

    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
