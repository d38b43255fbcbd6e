//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape or bounds violation in raster/tensor geometry.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Coordinate arithmetic selected an empty or invalid region.
    #[error("geometry error: {0}")]
    Geometry(String),

    /// A stitched output left at least one pixel uncovered.
    #[error("coverage error: {0}")]
    Coverage(String),

    /// Metric requested on masks where every class is absent.
    #[error("undefined score: {0}")]
    UndefinedScore(String),

    /// Scene synthesis could not place a blob within the retry budget.
    #[error("generation error: {0}")]
    Generation(String),

    /// Malformed configuration or manifest.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed binary file (bad magic, version, dtype, truncation).
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// I/O failure, annotated with the file path.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }
}
