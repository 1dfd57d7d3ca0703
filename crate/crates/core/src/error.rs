use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not conform; names the offending axis.
    #[error("shape mismatch in {op}: axis {axis} expects {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        axis: usize,
        expected: usize,
        got: usize,
    },

    /// An index (label, action, arm) is outside its valid range.
    #[error("index out of range in {context}: {index} >= {bound}")]
    IndexOutOfRange {
        context: &'static str,
        index: usize,
        bound: usize,
    },

    /// A non-finite value was produced or supplied where finiteness is required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Invalid configuration (bad hyperparameter, variant mismatch, ...).
    #[error("config error: {0}")]
    Config(String),

    /// File format violation (bad magic, truncation, version mismatch).
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
