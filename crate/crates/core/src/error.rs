use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Error {
    #[error("malformed priority value {0:?}")]
    MalformedPriority(String),

    #[error("invalid policy: {field}: {reason}")]
    InvalidPolicy { field: String, reason: String },

    #[error("invalid adaptation rules: {0}")]
    InvalidRules(String),

    #[error("invalid profile {name:?}: {reason}")]
    InvalidProfile { name: String, reason: String },

    #[error("no adaptation rule for state {0}")]
    UnknownState(String),

    #[error("{0} queue is full")]
    QueueFull(String),

    #[error("no healthy instance available")]
    NoHealthyInstance,

    #[error("invalid pool: {0}")]
    InvalidPool(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("io: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn policy(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidPolicy {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
