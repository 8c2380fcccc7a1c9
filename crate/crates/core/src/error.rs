use std::fmt;

/// Errors raised anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes or sizes that cannot be combined.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// An API used outside its contract (non-scalar backward root, missing head length, ...).
    #[error("usage error: {0}")]
    Usage(String),
    /// A model or file configuration violates a constraint.
    #[error("config error: {0}")]
    Config(String),
    /// Patch windows would skip pixels.
    #[error("invalid overlap: kernel {kernel} is smaller than stride {stride}, so {skipped} pixel(s) between adjacent windows are never visited")]
    InvalidOverlap {
        kernel: usize,
        stride: usize,
        skipped: usize,
    },
    /// NaN or infinity appeared in a tensor.
    #[error("non-finite value in {0}")]
    NonFinite(String),
    /// Malformed or incompatible checkpoint.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl fmt::Display) -> Self {
        Error::Dimension(msg.to_string())
    }

    pub(crate) fn config(msg: impl fmt::Display) -> Self {
        Error::Config(msg.to_string())
    }
}
