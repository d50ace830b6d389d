use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: malformed line {line}: {reason}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("{path}: invalid UTF-8 at byte {offset}")]
    InvalidUtf8 { path: PathBuf, offset: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid document: {0}")]
    InvalidDocument(String),

    #[error("empty token list")]
    EmptyTokenList,

    #[error("example pool too small: need {needed}, have {available}")]
    PoolTooSmall { needed: usize, available: usize },

    #[error("missing domain tag: {0}")]
    MissingDomainTag(String),

    #[error("backend unreachable: {0}")]
    BackendUnreachable(String),

    #[error("backend error (status {status}): {body}")]
    BackendError { status: u16, body: String },

    #[error("backend protocol violation: {0}")]
    BackendProtocol(String),

    #[error("invalid tensor {name:?}: {reason}")]
    InvalidTensor { name: String, reason: String },

    #[error("shape mismatch for tensor {0:?}")]
    ShapeMismatch(String),

    #[error("parameter sets have different tensor names")]
    NameSetMismatch,

    #[error("trainer failed for client {client_id:?} in round {round}: {reason}")]
    TrainerFailure {
        client_id: String,
        round: usize,
        reason: String,
    },

    #[error("response and reference id sets differ: {0}")]
    IdMismatch(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Prefixes the error with where it happened.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Variant name of the innermost error, for log lines and exit messages.
    pub fn kind(&self) -> &'static str {
        match self.root() {
            Error::MalformedLine { .. } => "MalformedLine",
            Error::DuplicateId(_) => "DuplicateId",
            Error::InvalidUtf8 { .. } => "InvalidUtf8",
            Error::Config(_) => "Config",
            Error::InvalidDocument(_) => "InvalidDocument",
            Error::EmptyTokenList => "EmptyTokenList",
            Error::PoolTooSmall { .. } => "PoolTooSmall",
            Error::MissingDomainTag(_) => "MissingDomainTag",
            Error::BackendUnreachable(_) => "BackendUnreachable",
            Error::BackendError { .. } => "BackendError",
            Error::BackendProtocol(_) => "BackendProtocol",
            Error::InvalidTensor { .. } => "InvalidTensor",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::NameSetMismatch => "NameSetMismatch",
            Error::TrainerFailure { .. } => "TrainerFailure",
            Error::IdMismatch(_) => "IdMismatch",
            Error::Checkpoint(_) => "Checkpoint",
            Error::Io { .. } => "Io",
            Error::Json(_) => "Json",
            Error::Context { .. } => unreachable!("root() strips context"),
        }
    }

    /// The innermost error, skipping context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
