//! Error types shared across the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, TorsdError>;

/// All failure modes of the training framework.
///
/// The CLI maps these onto its exit-code taxonomy: config errors exit 1,
/// data errors exit 2, divergence exits 3, I/O errors exit 4.
#[derive(Debug, thiserror::Error)]
pub enum TorsdError {
    /// A config file could not be parsed at all.
    #[error("config syntax error: {0}")]
    ConfigSyntax(String),

    /// A parsed config violates an invariant; names the offending key.
    #[error("config validation error: {key}: {message}")]
    ConfigValidation { key: String, message: String },

    /// The dataset cannot yield a single valid triplet.
    #[error("sampling infeasible: {0}")]
    SamplingInfeasible(String),

    /// An image contains non-finite pixel values.
    #[error("invalid image: {0}")]
    InvalidImage(String),

    /// Tensor shapes do not line up.
    #[error("shape error: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    /// Anchor and negative share a label.
    #[error("invalid triplet: {0}")]
    InvalidTriplet(String),

    /// An operation was called in a state that cannot support it.
    #[error("state error: {0}")]
    State(String),

    /// A scalar argument is out of range.
    #[error("argument error: {0}")]
    Argument(String),

    /// The requested statistic is undefined for this input.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Training produced a non-finite loss; carries the loss breakdown.
    #[error("training diverged at step {step}: total loss {total}")]
    Divergence { step: u64, total: f64 },

    /// A checkpoint blob failed to decode; names the parameter.
    #[error("corrupt checkpoint blob for parameter `{param}`: {message}")]
    CorruptBlob { param: String, message: String },

    /// Filesystem failure with the path that caused it.
    #[error("io error at {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TorsdError {
    pub fn shape(expected: impl Into<String>, actual: impl Into<String>) -> Self {
        TorsdError::Shape {
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        TorsdError::ConfigValidation {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TorsdError::Io {
            path: path.into(),
            source,
        }
    }
}
