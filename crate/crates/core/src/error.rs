use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported image format in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("unsupported bit depth {depth} in {path} (only 8-bit images are accepted)")]
    BitDepth { path: PathBuf, depth: u32 },

    #[error("patch at ({x}, {y}) with size {k} does not fit in {width}x{height} image")]
    OutOfBounds {
        x: usize,
        y: usize,
        k: usize,
        width: usize,
        height: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("non-finite gradient at iteration {iteration}")]
    NonFiniteGradient { iteration: usize },

    #[error("group at reference ({x}, {y}) failed: {source}")]
    Group {
        x: usize,
        y: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
