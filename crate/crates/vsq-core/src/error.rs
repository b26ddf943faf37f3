use std::path::PathBuf;
use thiserror::Error;

/// Errors produced by the quantization library.
#[derive(Debug, Error)]
pub enum VsqError {
    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed tensor header: {0}")]
    MalformedHeader(String),

    #[error("shape/data length mismatch: shape declares {expected} elements, payload has {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("non-finite value at element {index}")]
    NonFinite { index: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    /// Width or accumulator overflow inside the simulated datapath. Must be
    /// unreachable when the configured widths are respected.
    #[error("internal datapath error: {0}")]
    Internal(String),

    #[error("malformed config: {0}")]
    MalformedConfig(String),
}

pub type Result<T> = std::result::Result<T, VsqError>;
