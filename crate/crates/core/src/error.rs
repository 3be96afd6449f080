use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the pipeline.
///
/// Variants map onto the CLI exit-code classes: `Config` and `Usage` are
/// caller mistakes (exit 2), everything else is a runtime/data failure (exit 1).
#[derive(Debug, Error)]
pub enum DacError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate vector: norm {norm:e} below {min:e}")]
    Degenerate { norm: f64, min: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("open-set split violation: {0}")]
    Split(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl DacError {
    pub fn shape(msg: impl Into<String>) -> Self {
        Self::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self::Data(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Self::Usage(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad arguments or configuration.
    pub fn is_usage(&self) -> bool {
        matches!(self, Self::Config(_) | Self::Usage(_))
    }
}

pub type Result<T> = std::result::Result<T, DacError>;
