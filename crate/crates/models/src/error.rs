use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Core(#[from] ccgen_core::Error),
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged in {stage} at step {step}")]
    TrainingDiverged { stage: String, step: usize },
    #[error("sampling diverged at step {step}")]
    SamplingDiverged { step: usize },
    #[error("decode failed: {0}")]
    DecodeFailed(String),
    #[error("refinement skipped: no qualified compositions")]
    RefinementSkipped,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
