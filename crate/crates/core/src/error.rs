use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("invalid bounding box: {0}")]
    InvalidBox(String),

    #[error("expected a single-channel raster, got {0}")]
    Channel(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("extraction failed ({extractor}): {diagnostics}")]
    Extraction { extractor: String, diagnostics: String },

    #[error("backend contract violated: {0}")]
    ContractViolation(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("variant index {index} out of range (count {count})")]
    VariantIndex { index: usize, count: usize },

    #[error("generation failed ({backend}): {diagnostics}")]
    Generation { backend: String, diagnostics: String },

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("metric error ({metric}): {reason}")]
    Metric { metric: String, reason: String },

    #[error("pool scoring failed: {failed} of {total} images could not be scored")]
    PoolScoring { failed: usize, total: usize },

    #[error("embedding error: {0}")]
    Embedding(String),

    #[error("input error: {0}")]
    Input(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image { path: path.into(), source }
    }
}
