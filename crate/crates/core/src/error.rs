use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the simulator and its file formats.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("config file {path}: {source}")]
    ConfigRead {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config syntax: {0}")]
    ConfigSyntax(String),

    #[error("impression field `{field}`: {reason}")]
    Parse { field: &'static str, reason: String },

    #[error("line {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid outcomes: {0}")]
    Outcomes(&'static str),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("empty candidate set")]
    NoCandidates,

    #[error("unequal control/test fractions ({control} vs {test})")]
    UnequalGroups { control: f64, test: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { field: field.into(), reason: reason.into() }
    }

    pub(crate) fn parse(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Parse { field, reason: reason.into() }
    }

    /// True for errors caused by bad user input (config or usage) rather than
    /// a runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::ConfigRead { .. } | Error::ConfigSyntax(_) | Error::UnequalGroups { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
