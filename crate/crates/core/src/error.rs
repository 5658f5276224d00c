use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration supplied by the caller.
    #[error("configuration error: {0}")]
    Config(String),
    /// A precondition of an operation was violated (shape, length, layout).
    #[error("contract violation: {0}")]
    Contract(String),
    /// A computation produced or received a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("statistical test undefined: {0}")]
    UndefinedTest(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::Numeric(_) => "numeric",
            Error::UndefinedTest(_) => "undefined_test",
            Error::Io { .. } => "io",
            Error::Serde(_) => "serde",
        }
    }

    /// Prefix the message with context (used to tag round/epoch/trial).
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Error::Config(m) => Error::Config(format!("{ctx}: {m}")),
            Error::Contract(m) => Error::Contract(format!("{ctx}: {m}")),
            Error::Numeric(m) => Error::Numeric(format!("{ctx}: {m}")),
            Error::UndefinedTest(m) => Error::UndefinedTest(format!("{ctx}: {m}")),
            Error::Serde(m) => Error::Serde(format!("{ctx}: {m}")),
            e @ Error::Io { .. } => e,
        }
    }
}

impl Clone for Error {
    fn clone(&self) -> Self {
        match self {
            Error::Config(m) => Error::Config(m.clone()),
            Error::Contract(m) => Error::Contract(m.clone()),
            Error::Numeric(m) => Error::Numeric(m.clone()),
            Error::UndefinedTest(m) => Error::UndefinedTest(m.clone()),
            Error::Serde(m) => Error::Serde(m.clone()),
            Error::Io { path, source } => Error::Io {
                path: path.clone(),
                source: std::io::Error::new(source.kind(), source.to_string()),
            },
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
