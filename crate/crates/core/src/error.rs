use std::fmt;

use thiserror::Error;

/// Errors raised across the optimizer, kernels and file codecs.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("structural error: {0}")]
    Structural(String),

    #[error("non-finite gradient in tensor `{tensor}` at flat index {index} (value {value})")]
    NonFiniteGradient {
        tensor: String,
        index: usize,
        value: f64,
    },

    #[error("divergence at step {step}: objective {objective:e} exceeds {limit:e}")]
    Divergence {
        step: u64,
        objective: f64,
        limit: f64,
    },

    #[error("no convergence after {sweeps} sweeps (last max change {last_change:e})")]
    NonConvergence { sweeps: usize, last_change: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim(msg: impl fmt::Display) -> Error {
    Error::Dimension(msg.to_string())
}

pub(crate) fn param(msg: impl fmt::Display) -> Error {
    Error::Parameter(msg.to_string())
}
