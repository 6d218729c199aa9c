//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad or inconsistent configuration (unknown key, invalid value, shape
    /// that cannot be assembled into a model).
    #[error("config error: {0}")]
    Config(String),

    /// Tensor shapes that do not line up at a module boundary.
    #[error("shape error: {0}")]
    Shape(String),

    /// Dataset layout or content problems.
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint archive problems; always names the offending entry.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training aborted (e.g. non-finite loss); carries a diagnostic dump.
    #[error("training aborted at iteration {iteration}: {reason}")]
    TrainingAborted { iteration: usize, reason: String },

    /// Peak-memory measurement is not available in this process.
    #[error("memory measurement unsupported: tracking allocator not installed")]
    MeasurementUnsupported,

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
