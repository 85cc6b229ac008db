use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GeodinError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GeodinError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("index {index} out of range for {len} classes")]
    Index { index: usize, len: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported head variant `{variant}`: {hint}")]
    UnsupportedVariant { variant: String, hint: String },

    #[error("invalid state: {0}")]
    State(String),

    #[error("wrong operation: {0}")]
    WrongOperation(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("missing embedding tokens for: {}", .0.join(", "))]
    MissingTokens(Vec<String>),

    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },

    #[error("corrupt checkpoint: {0}")]
    Integrity(String),

    #[error("unsupported checkpoint version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl GeodinError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GeodinError::Io {
            path: path.into(),
            source,
        }
    }
}
