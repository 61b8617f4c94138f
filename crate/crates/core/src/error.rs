use std::fmt;
use std::path::PathBuf;

/// A validation problem attached to a location inside an experiment config.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

impl FieldError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid dimension {0}: need at least {1}")]
    InvalidDimension(usize, usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("time {0} lies outside [0, 1]")]
    InvalidTime(f64),
    #[error("index {index} out of range 1..={n}")]
    InvalidIndex { index: usize, n: usize },
    #[error("matrix is not positive semi-definite (pivot {pivot} = {value:e})")]
    NotPsd { pivot: usize, value: f64 },
    #[error("kernel is not of positive type (eigenvalue {min_eigenvalue:e}, largest {max_eigenvalue:e})")]
    NotPositiveType { min_eigenvalue: f64, max_eigenvalue: f64 },
    #[error("argument out of domain: {0}")]
    OutOfDomain(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("need at least {needed} replicates, got {got}")]
    InsufficientReplicates { needed: usize, got: usize },
    #[error("invalid pairing: {0}")]
    InvalidPairing(String),
    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),
    #[error("invalid configuration:\n{}", .0.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n"))]
    Config(Vec<FieldError>),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, with stage wrappers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    /// Process exit code: 2 for configuration and input problems, 3 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config(_)
            | Error::InvalidParameter(_)
            | Error::InvalidDimension(..)
            | Error::InvalidInput(_)
            | Error::InvalidIndex { .. }
            | Error::InvalidTime(_)
            | Error::MissingArtifact(_)
            | Error::Json(_)
            | Error::Csv(_)
            | Error::Io(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
