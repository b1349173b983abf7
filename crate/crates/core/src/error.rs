use thiserror::Error;

/// Errors raised by the simulation, perturbation and verification routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SmpError {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("policy returned rate {rate} on path {path} at step {step}")]
    InvalidRate { path: usize, step: usize, rate: f64 },

    #[error("market path {path} diverged at step {step}")]
    DivergedPath { path: usize, step: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("all {n_paths} paths were excluded")]
    AllPathsExcluded { n_paths: usize },

    #[error("internal consistency violated: {0}")]
    Inconsistent(String),

    #[error("CFL condition violated: {0}")]
    Cfl(String),
}

pub type Result<T> = std::result::Result<T, SmpError>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> SmpError {
    SmpError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
