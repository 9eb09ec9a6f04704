use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("degenerate direction: {0} has zero norm")]
    DegenerateDirection(&'static str),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("loss became non-finite at iteration {iter}")]
    NonFiniteLoss { iter: usize },

    #[error("invalid label value {value} at pixel ({row}, {col}); expected one of 0..=3")]
    InvalidLabel { value: u8, row: usize, col: usize },

    #[error("unknown registry entry `{0}`")]
    UnknownComponent(String),

    #[error("artifact mismatch: {0}")]
    ArtifactMismatch(String),

    #[error("image error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("unsupported image format for {path}: {detail}")]
    UnsupportedFormat { path: PathBuf, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
