use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config at {path}: {message}")]
    InvalidConfig { path: String, message: String },
    #[error("missing artifact {path}: {message}")]
    MissingArtifact { path: String, message: String },
    #[error("i/o on {path}: {message}")]
    Io { path: String, message: String },
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn runtime(e: impl ToString) -> Self {
        CliError::Runtime(e.to_string())
    }

    pub fn io(path: &std::path::Path, e: impl ToString) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::InvalidConfig { .. } => 2,
            CliError::MissingArtifact { .. } => 3,
            CliError::Io { .. } => 4,
        }
    }

    /// The machine-readable form printed on stderr.
    pub fn to_json(&self) -> serde_json::Value {
        let (kind, path, message) = match self {
            CliError::InvalidConfig { path, message } => ("invalid_config", Some(path), message.clone()),
            CliError::MissingArtifact { path, message } => ("missing_artifact", Some(path), message.clone()),
            CliError::Io { path, message } => ("io", Some(path), message.clone()),
            CliError::Runtime(m) => ("runtime", None, m.clone()),
        };
        json!({"error": {"kind": kind, "path": path, "message": message, "exit_code": self.exit_code()}})
    }
}
