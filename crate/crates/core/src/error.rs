use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("events out of order at line {line}: t={t} follows t={prev}")]
    Ordering { line: usize, prev: u64, t: u64 },
    #[error("invalid polarity {0}, expected -1 or +1")]
    Polarity(i64),
    #[error("event ({x},{y}) outside {width}x{height} sensor")]
    OutOfBounds {
        x: u32,
        y: u32,
        width: u32,
        height: u32,
    },
    #[error("invalid time window [{t0}, {t1})")]
    Window { t0: u64, t1: u64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
    #[error("sampling quota unreachable: {0}")]
    Quota(String),
    #[error("image error: {0}")]
    Image(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Stable lower-case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Ordering { .. } => "ordering",
            Error::Polarity(_) => "polarity",
            Error::OutOfBounds { .. } => "out-of-bounds",
            Error::Window { .. } => "window",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Invalid(_) => "invalid",
            Error::Checkpoint(_) => "checkpoint",
            Error::Quota(_) => "quota",
            Error::Image(_) => "image",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
