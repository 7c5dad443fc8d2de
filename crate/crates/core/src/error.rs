use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("malformed {file}: {field}: {detail}")]
    Format {
        file: String,
        field: &'static str,
        detail: String,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("LP solver gave up after {iterations} iterations")]
    SolverIterationCap { iterations: usize },

    #[error("LP solver failure: {0}")]
    Solver(String),

    #[error("training policy admits no positive margin: {0}")]
    DegeneratePolicy(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numeric, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) | Error::Capacity(_) => 2,
            Error::Format { .. } | Error::Io { .. } | Error::Json { .. } | Error::Csv(_) => 3,
            Error::Numeric(_)
            | Error::Diverged { .. }
            | Error::SolverIterationCap { .. }
            | Error::Solver(_)
            | Error::DegeneratePolicy(_) => 4,
        }
    }
}
