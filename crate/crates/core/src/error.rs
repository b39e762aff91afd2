use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("column `{0}` not found in header")]
    MissingColumn(String),

    #[error("non-numeric value `{value}` in column `{column}` at data row {row}")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("column `{0}` is constant and cannot be standardized")]
    ConstantColumn(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("non-finite loss ({context})")]
    NonFiniteLoss { context: String },

    #[error("not enough records: need {need}, have {have}")]
    InsufficientRecords { need: usize, have: usize },

    #[error("every hyperparameter setting failed to train")]
    AllSettingsFailed,

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping any context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code for this error class. Zero is never returned.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config(_) | Error::Toml(_) => 2,
            Error::Dimension { .. } => 3,
            Error::MissingColumn(_) | Error::NonNumeric { .. } | Error::ConstantColumn(_) => 4,
            Error::Csv(_) | Error::Json(_) | Error::Checkpoint(_) => 5,
            Error::Io { .. } => 6,
            Error::Numerical(_) | Error::NonFiniteLoss { .. } => 7,
            Error::InsufficientRecords { .. } | Error::AllSettingsFailed => 8,
            Error::Context { .. } => 1,
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn context_with<F: FnOnce() -> String>(self, f: F) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context_with<F: FnOnce() -> String>(self, f: F) -> Result<T> {
        self.map_err(|e| e.context(f()))
    }
}
