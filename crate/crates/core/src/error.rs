//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or weight axis does not have the expected extent.
    #[error("dimension mismatch on {axis}: expected {expected}, got {got}")]
    Dimension {
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    /// Stride/padding/kernel combination produces an empty or invalid output.
    #[error("invalid convolution geometry: {0}")]
    Geometry(String),

    /// Channel split point outside (0, c).
    #[error("invalid channel partition: {0}")]
    Partition(String),

    /// Operator or layer configuration violates an invariant.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An operation was invoked under a variant that does not support it.
    #[error("variant mismatch: {0}")]
    Variant(String),

    /// Cached activations are inconsistent with the supplied configuration.
    #[error("inconsistent state: {0}")]
    State(String),

    /// A non-finite value reached a numeric kernel.
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    /// Shape propagation through an architecture failed.
    #[error("shape propagation failed at layer `{layer}`: {reason}")]
    Propagation { layer: String, reason: String },

    /// Unknown builtin architecture name.
    #[error("unknown architecture `{0}`")]
    UnknownArch(String),

    /// A data file does not match the expected binary format.
    #[error("data format error: {0}")]
    Format(String),

    /// A data file parsed but contains impossible values.
    #[error("corrupt data: {0}")]
    Corrupt(String),

    /// Expected dataset files are absent.
    #[error("missing data: {0}")]
    MissingData(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence {
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
