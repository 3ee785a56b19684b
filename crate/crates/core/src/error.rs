use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("empty item: {0}")]
    EmptyItem(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("degenerate vector: {0}")]
    DegenerateVector(String),
    #[error("background data contains excluded class {0:?}")]
    Contamination(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("no negative candidates: {0}")]
    NoNegative(String),
    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("missing artifact {}: {message}", path.display())]
    MissingArtifact { path: PathBuf, message: String },
    #[error("i/o error on {}: {source}", path.display())]
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

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable tag, used by the CLI's single-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Format(_) => "format",
            Error::Shape(_) => "shape",
            Error::EmptyItem(_) => "empty_item",
            Error::Argument(_) => "argument",
            Error::DegenerateVector(_) => "degenerate_vector",
            Error::Contamination(_) => "contamination",
            Error::State(_) => "state",
            Error::NoNegative(_) => "no_negative",
            Error::Config { .. } => "config",
            Error::MissingArtifact { .. } => "missing_artifact",
            Error::Io { .. } => "io",
        }
    }
}
