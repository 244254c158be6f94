use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {msg}")]
    Stage { stage: String, msg: String },
}

impl CliError {
    pub fn stage(stage: &str, err: impl std::fmt::Display) -> Self {
        CliError::Stage { stage: stage.to_string(), msg: err.to_string() }
    }

    /// Process exit code: 2 for configuration errors, 3 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage { .. } => 3,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
