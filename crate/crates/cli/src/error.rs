use std::path::{Path, PathBuf};

use geodin::GeodinError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{origin}{}: {msg}", line.map(|l| format!(" line {l}")).unwrap_or_default())]
    Config {
        origin: String,
        line: Option<usize>,
        msg: String,
    },

    #[error("{0}")]
    Data(String),

    #[error("{0}")]
    Core(#[from] GeodinError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config {
            origin: "configuration".into(),
            line: None,
            msg: msg.into(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 for configuration errors, 3 for unusable inputs, 4 for numeric
    /// failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Data(_) | CliError::Io { .. } => 3,
            CliError::Core(e) => match e {
                GeodinError::Config(_) | GeodinError::UnsupportedVariant { .. } | GeodinError::WrongOperation(_) => 2,
                GeodinError::Numeric(_) => 4,
                _ => 3,
            },
        }
    }
}
