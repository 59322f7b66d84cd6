use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the analysis stages can report.
///
/// The variants are grouped by the CLI exit code they map to; see
/// [`Error::kind`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("I/O error: {0}")]
    Stream(#[from] io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("missing upstream artifact {}: {hint}", path.display())]
    MissingArtifact { path: PathBuf, hint: String },
    #[error("input error: {0}")]
    Input(String),
    #[error("empty universe: every stock failed the coverage rule")]
    EmptyUniverse,
    #[error("series for {symbol} is constant; rank correlation is undefined")]
    ConstantSeries { symbol: String },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Input,
    Numerical,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Parameter(_) => ErrorKind::Config,
            Error::Numerical(_) | Error::Degenerate(_) | Error::ConstantSeries { .. } => {
                ErrorKind::Numerical
            }
            _ => ErrorKind::Input,
        }
    }
}
