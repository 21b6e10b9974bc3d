//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty event stream")]
    EmptyStream,

    #[error("event {index} at ({x},{y}) outside {width}x{height} sensor")]
    EventOutOfBounds {
        index: usize,
        x: u16,
        y: u16,
        width: u16,
        height: u16,
    },

    #[error("invalid polarity {value} at byte offset {offset} (must be -1 or +1)")]
    InvalidPolarity { value: i64, offset: u64 },

    #[error("bad magic at byte offset {offset}: expected {expected:?}, found {found:?}")]
    BadMagic {
        offset: u64,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("truncated file at byte offset {offset}: needed {needed} more bytes")]
    Truncated { offset: u64, needed: usize },

    #[error("timestamps not sorted at byte offset {offset}: {prev} followed by {next}")]
    UnsortedTimestamps { offset: u64, prev: f64, next: f64 },

    #[error("invalid timestamp {value} at byte offset {offset} (must be finite and >= 0)")]
    InvalidTimestamp { value: f64, offset: u64 },

    #[error("{format} parse error at {location}: {message}")]
    Parse {
        format: &'static str,
        location: String,
        message: String,
    },

    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got shape {dims:?}")]
    NonScalarLoss { dims: Vec<usize> },

    #[error("non-finite gradient in parameter \"{name}\"")]
    NonFiniteGradient { name: String },

    #[error("non-finite loss at step {step} (batch sample ids: {batch_ids:?})")]
    NonFiniteLoss { step: usize, batch_ids: Vec<String> },

    #[error("checkpoint has no parameter named \"{name}\"")]
    MissingParameter { name: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing data files: {ids:?}")]
    MissingFiles { ids: Vec<String> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Shorthand used by ops that compare two shapes.
    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], found: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }
}
