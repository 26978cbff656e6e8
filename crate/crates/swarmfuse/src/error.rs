//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch between tensors or grids.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Invalid configuration value or combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed binary file (dataset or checkpoint).
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// View placement failed after exhausting rejection samples.
    #[error("placement error: {0}")]
    Placement(String),

    /// An optimizer step was requested for a parameter without a gradient.
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    /// A forward pass produced NaN or Inf.
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Dimension error naming both offending shapes.
    pub fn shapes(context: &str, a: &[usize], b: &[usize]) -> Self {
        Error::Dimension(format!("{context}: {a:?} vs {b:?}"))
    }
}
