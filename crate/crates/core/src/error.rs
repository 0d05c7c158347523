use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the training pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke a shape or length contract between two inputs.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("index error: point {point} maps to pixel ({row}, {col}) outside a {height}x{width} map")]
    Index {
        point: usize,
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },

    #[error("generation error in scene {scene}: {reason}")]
    Generation { scene: String, reason: String },

    #[error("empty mask: none of the chosen classes {0:?} occur in the label map")]
    EmptyMask(Vec<usize>),

    #[error("undefined metric: no class occurs in ground truth or prediction")]
    UndefinedMetric,

    #[error("format error: {0}")]
    Format(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    /// Short machine-readable category, used by the CLI for one-line error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::Numeric(_) => "numeric",
            Error::Index { .. } => "index",
            Error::Generation { .. } => "generation",
            Error::EmptyMask(_) => "empty-mask",
            Error::UndefinedMetric => "undefined-metric",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
