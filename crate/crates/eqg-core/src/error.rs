//! Library-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EqgError {
    /// A parameter failed validation at construction time.
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    /// A time query fell outside the model horizon.
    #[error("time {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },

    /// Operands with incompatible shapes or lengths.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: String,
        got: String,
    },

    /// The backward Riccati integration exceeded the blow-up threshold.
    #[error(
        "Riccati blow-up at t = {t}: max |entry| = {magnitude:.6e} exceeds threshold {threshold:.1e}"
    )]
    RiccatiBlowUp {
        t: f64,
        magnitude: f64,
        threshold: f64,
    },

    /// NaN or infinity appeared during integration or simulation.
    #[error("non-finite value in {context} at t = {t}")]
    NonFinite { context: String, t: f64 },

    /// Malformed serialized data (CSV grids, solution files).
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    /// Numerical failure outside integration (singular matrix, failed factorization).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Filesystem failure while reading or writing data files.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl EqgError {
    pub fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        EqgError::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    pub fn dim(
        context: impl Into<String>,
        expected: impl Into<String>,
        got: impl Into<String>,
    ) -> Self {
        EqgError::DimensionMismatch {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, EqgError>;
