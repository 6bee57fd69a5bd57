use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: field `{field}`: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },

    #[error("duplicate participant id `{0}`")]
    DuplicateParticipant(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("chi-square test: expected count is zero in row {row}, column {col}; merge sparse categories before testing")]
    ZeroExpectedCount { row: usize, col: usize },

    #[error("missing artifact {path} (run `{stage}` first)")]
    MissingArtifact { stage: &'static str, path: PathBuf },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, field: &str, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            field: field.to_string(),
            message: message.into(),
        }
    }
}
