use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("unit conversion failed: {0}")]
    Conversion(String),
    #[error("row excluded: {0}")]
    RowExcluded(String),
    #[error("dataset has no usable records")]
    EmptyDataset,
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("no feasible candidates: {0}")]
    NoCandidates(String),
    #[error("registry error: {0}")]
    Registry(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint format version {found} is incompatible with {expected}")]
    Version { found: String, expected: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable short tag used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Input(_) => "input",
            Error::Conversion(_) => "conversion",
            Error::RowExcluded(_) => "row_excluded",
            Error::EmptyDataset => "empty_dataset",
            Error::Numerical(_) => "numerical",
            Error::NoCandidates(_) => "no_candidates",
            Error::Registry(_) => "registry",
            Error::Checkpoint(_) => "checkpoint",
            Error::Version { .. } => "version",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
