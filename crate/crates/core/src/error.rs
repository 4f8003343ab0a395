use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not symmetric (relative asymmetry {0:.3e})")]
    Asymmetric(f64),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("matrix is rank deficient at column {column}")]
    RankDeficient { column: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("invalid subtask: {0}")]
    Subtask(String),

    #[error("degenerate response batch: {0}")]
    DegenerateResponse(String),

    #[error("degenerate layer: {0}")]
    DegenerateLayer(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("training diverged at epoch {epoch}: total loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("format error in {context}: {message}")]
    Format { context: String, message: String },

    #[error("malformed file {context} at offset {offset}: {message}")]
    Malformed {
        context: String,
        offset: u64,
        message: String,
    },

    #[error("stratification: {0}")]
    Stratification(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("i/o error: {0}")]
    Stream(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Asymmetric(_) => "symmetry",
            Error::NonFinite(_) => "non_finite",
            Error::RankDeficient { .. } => "rank",
            Error::EmptyInput(_) => "empty_input",
            Error::Parameter(_) => "parameter",
            Error::Index(_) => "index",
            Error::Subtask(_) => "subtask",
            Error::DegenerateResponse(_) => "degenerate_response",
            Error::DegenerateLayer(_) => "degenerate_layer",
            Error::DegenerateInput(_) => "degenerate_input",
            Error::Diverged { .. } => "divergence",
            Error::Format { .. } => "format",
            Error::Malformed { .. } => "malformed",
            Error::Stratification(_) => "stratification",
            Error::Io { .. } | Error::Stream(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
