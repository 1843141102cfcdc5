use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DceError {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no convergence after {sweeps} sweeps (residual {residual:e})")]
    NotConverged { sweeps: usize, residual: f64 },

    #[error("non-finite value in {what} at epoch {epoch}, step {step}")]
    NonFinite {
        what: String,
        epoch: usize,
        step: usize,
    },

    #[error("non-finite gradient: {0}")]
    NonFiniteGradient(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl DceError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        DceError::Invalid(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        DceError::Shape(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, DceError>;
