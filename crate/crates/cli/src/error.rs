use std::fmt;
use std::path::{Path, PathBuf};

use serde_json::json;
use subdistill::Error;

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_DEGENERATE: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;
pub const EXIT_AGGREGATION: i32 = 5;

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    /// Bad arguments, configs or missing files.
    Input(String),
    InputPath { path: PathBuf, message: String },
    /// Run directories that cannot be combined.
    Aggregation(String),
}

impl CliError {
    pub fn input_path(path: &Path, message: impl Into<String>) -> Self {
        CliError::InputPath {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::input_path(path, e.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => match e {
                Error::Diverged { .. } => EXIT_DIVERGENCE,
                Error::DegenerateResponse(_)
                | Error::DegenerateLayer(_)
                | Error::DegenerateInput(_)
                | Error::RankDeficient { .. }
                | Error::Asymmetric(_)
                | Error::NonFinite(_) => EXIT_DEGENERATE,
                _ => EXIT_INPUT,
            },
            CliError::Input(_) | CliError::InputPath { .. } => EXIT_INPUT,
            CliError::Aggregation(_) => EXIT_AGGREGATION,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Input(_) | CliError::InputPath { .. } => "input",
            CliError::Aggregation(_) => "aggregation",
        }
    }

    /// One-line JSON document for stderr.
    pub fn to_json(&self) -> String {
        let mut doc = json!({
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        match self {
            CliError::Core(Error::Diverged { epoch, loss }) => {
                doc["epoch"] = json!(epoch);
                doc["loss"] = json!(loss.to_string());
            }
            CliError::Core(Error::Io { path, .. }) | CliError::InputPath { path, .. } => {
                doc["path"] = json!(path.display().to_string());
            }
            _ => {}
        }
        doc.to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Input(m) | CliError::Aggregation(m) => f.write_str(m),
            CliError::InputPath { path, message } => write!(f, "{}: {message}", path.display()),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}
