use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FeverError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FeverError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    Numeric { op: String },

    #[error("numeric error at step {step}: {source}")]
    StepNumeric {
        step: usize,
        #[source]
        source: Box<FeverError>,
    },

    #[error("{0}")]
    Graph(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}:{line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint version {found} not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FeverError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FeverError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn numeric(op: impl Into<String>) -> Self {
        FeverError::Numeric { op: op.into() }
    }

    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        FeverError::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            FeverError::Config { .. } | FeverError::InvalidArgument(_) => 2,
            FeverError::Numeric { .. } | FeverError::StepNumeric { .. } => 4,
            FeverError::Shape { .. }
            | FeverError::Graph(_)
            | FeverError::Invariant(_) => 4,
            FeverError::Data(_)
            | FeverError::Manifest { .. }
            | FeverError::Checkpoint(_)
            | FeverError::CheckpointVersion { .. }
            | FeverError::Io { .. } => 3,
        }
    }

    /// Short machine-parseable tag used in one-line error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            FeverError::Shape { .. } => "shape",
            FeverError::Numeric { .. } | FeverError::StepNumeric { .. } => "numeric",
            FeverError::Graph(_) => "graph",
            FeverError::InvalidArgument(_) => "argument",
            FeverError::Data(_) | FeverError::Manifest { .. } => "data",
            FeverError::Config { .. } => "config",
            FeverError::Checkpoint(_) | FeverError::CheckpointVersion { .. } => "checkpoint",
            FeverError::Invariant(_) => "invariant",
            FeverError::Io { .. } => "io",
        }
    }
}
