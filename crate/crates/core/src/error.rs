use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode/encode failed for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("invalid patch: {0}")]
    InvalidPatch(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("class index {index} out of range 1..={count}")]
    ClassOutOfRange { index: usize, count: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("selection error: {0}")]
    Selection(String),

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error("report error: {0}")]
    Report(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category used by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::InvalidPatch(_) => "invalid_patch",
            Error::Dataset(_) => "dataset",
            Error::ClassOutOfRange { .. } => "class_range",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Divergence(_) => "divergence",
            Error::Selection(_) => "selection",
            Error::Scenario(_) => "scenario",
            Error::Report(_) => "report",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
