use std::fmt;

/// Errors produced anywhere in the inference engine, the file formats, or the
/// performance model.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot quantize non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f32 },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("position {pos} is outside the context window of {seq_len}")]
    Capacity { pos: usize, seq_len: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("token id {token} out of range for vocabulary of {vocab_size}")]
    TokenRange { token: i64, vocab_size: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("perf model error: {0}")]
    Model(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(args: fmt::Arguments<'_>) -> Self {
        Error::Shape(args.to_string())
    }

    pub(crate) fn format(args: fmt::Arguments<'_>) -> Self {
        Error::Format(args.to_string())
    }
}
