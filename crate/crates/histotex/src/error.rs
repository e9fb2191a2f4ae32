//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the crate.
///
/// The variants map onto the CLI exit-code classes: configuration problems,
/// bad runtime inputs, I/O failures and numerical failures.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration is structurally invalid (bad shapes, bad ratios,
    /// unknown kinds, unsatisfiable size contracts).
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor dimensions do not line up for an operation.
    #[error("dimension error: {0}")]
    Dim(String),

    /// A runtime input is invalid (label out of range, missing factor
    /// labels, incompatible checkpoint).
    #[error("input error: {0}")]
    Input(String),

    /// An API was used out of contract (non-scalar backward root, repeated
    /// backward on one tape).
    #[error("usage error: {0}")]
    Usage(String),

    /// A computation produced a non-finite value where that is a failure
    /// (training divergence, gradient-check evaluation).
    #[error("numerical error: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A file has the wrong format (PGM header, manifest, checkpoint).
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
