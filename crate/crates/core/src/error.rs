use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed template or config text.
    #[error("schema error: {0}")]
    Schema(String),

    /// A name or index that points at nothing.
    #[error("reference error: {0}")]
    Reference(String),

    /// Numerically invalid geometry (non-positive variance, out-of-domain point,
    /// non-coincident canonical anchor pair).
    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("singular transform for part `{part}` (|det| = {det:e})")]
    SingularTransform { part: String, det: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sample {index}: no valid pose after {attempts} attempts")]
    SamplingExhausted { index: usize, attempts: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
