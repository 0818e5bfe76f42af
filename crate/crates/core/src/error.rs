use std::path::PathBuf;

use crate::raster::RasterWindow;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration or input value violates a documented invariant.
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("window {window:?} exceeds raster bounds {width}x{height}")]
    OutOfBounds {
        window: RasterWindow,
        width: usize,
        height: usize,
    },

    #[error("block shape mismatch: expected {expected} samples, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("unsupported raster: {0}")]
    Unsupported(String),

    #[error("empty region: {0}")]
    EmptyRegion(String),

    #[error("CRS mismatch: EPSG:{left} vs EPSG:{right}")]
    CrsMismatch { left: u32, right: u32 },

    #[error("predictor error: {0}")]
    Predictor(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("tiff: {0}")]
    Tiff(#[from] tiff::TiffError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Invalid(_)
                | Error::OutOfBounds { .. }
                | Error::ShapeMismatch { .. }
                | Error::Unsupported(_)
                | Error::CrsMismatch { .. }
        )
    }
}
