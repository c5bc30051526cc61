//! Crate-wide error type.

use alloc::string::String;
use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum CdsError {
    /// Vector norm at or below the degeneracy threshold; normalizing would
    /// pick an arbitrary direction.
    #[error("vector norm {norm:e} is too small to normalize")]
    NormTooSmall { norm: f64 },

    /// Softmax temperature must be strictly positive.
    #[error("softmax temperature must be > 0, got {tau}")]
    InvalidTemperature { tau: f64 },

    /// Index outside the valid range of a distribution, bank, or dataset.
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    /// Cross entropy of a zero probability is unbounded.
    #[error("cross entropy at index {index} is infinite (probability is zero)")]
    InfiniteLoss { index: usize },

    /// Vector or matrix dimensions do not chain.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Backward pass invoked with a cache from a different model shape.
    #[error("forward cache does not match the model")]
    CacheMismatch,

    /// A domain that must contain samples is empty.
    #[error("domain `{0}` has no samples")]
    EmptyDomain(&'static str),

    /// A batch that must contain samples is empty.
    #[error("batch `{0}` has no samples")]
    EmptyBatch(&'static str),

    /// A reference feature set that must contain samples is empty.
    #[error("reference set `{0}` has no samples")]
    EmptyReference(&'static str),

    /// Configuration rejected before any work started.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = core::result::Result<T, CdsError>;
