use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors surfaced by every module of the crate.
///
/// The variants are grouped by category so that front ends (the CLI in
/// particular) can map them onto distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("codec error: {0}")]
    Codec(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("checkpoint format version {found} is incompatible with {expected}")]
    IncompatibleVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("shape mismatch for parameter `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("non-finite loss at step {step} (lr {lr:e}, batch {batch})")]
    NonFiniteLoss { step: u64, lr: f64, batch: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Short category label, stable across releases.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Dimension(_) => "dimension",
            Error::Input(_) => "input",
            Error::Codec(_) => "codec",
            Error::Parse { .. } | Error::Json(_) | Error::Csv(_) => "parse",
            Error::Validation(_) => "validation",
            Error::UndefinedCorrelation(_) => "statistics",
            Error::IncompatibleVersion { .. } | Error::Corrupt { .. } | Error::ShapeMismatch { .. } => {
                "checkpoint"
            }
            Error::NonFiniteLoss { .. } => "training",
            Error::Io { .. } | Error::Image(_) => "io",
        }
    }
}
