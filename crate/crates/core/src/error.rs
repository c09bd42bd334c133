use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric fault in {op}: non-finite value produced")]
    NumericFault { op: &'static str },

    #[error("signal too short: {samples} samples, need at least {needed}")]
    TooShort { samples: usize, needed: usize },

    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),

    #[error("protocol violation: {0}")]
    ProtocolViolation(String),

    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),

    #[error("degenerate test: {0}")]
    DegenerateTest(String),

    #[error("trial {trial}: {source}")]
    Trial {
        trial: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("ablation cell (routing {routing}, decoder {decoder}): {source}")]
    AblationCell {
        routing: usize,
        decoder: bool,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }

    /// Short machine-parsable class name, used by the CLI on failure.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::UnsupportedFormat(_) => "unsupported-format",
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Contract(_) => "contract",
            Error::NumericFault { .. } => "numeric-fault",
            Error::TooShort { .. } => "too-short",
            Error::DegenerateSignal(_) => "degenerate-signal",
            Error::ProtocolViolation(_) => "protocol-violation",
            Error::Divergence { .. } => "divergence",
            Error::UndefinedAuc(_) => "undefined-auc",
            Error::DegenerateTest(_) => "degenerate-test",
            Error::Trial { source, .. } | Error::AblationCell { source, .. } => source.class(),
        }
    }
}
