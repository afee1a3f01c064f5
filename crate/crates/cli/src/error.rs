use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("stage {stage} needs {artifact}, which is missing; run {producer} first")]
    Dependency {
        stage: String,
        producer: String,
        artifact: PathBuf,
    },
    #[error(
        "stale artifact {path}: hash {found} differs from the {expected} recorded by {producer}"
    )]
    Stale {
        path: PathBuf,
        producer: String,
        expected: String,
        found: String,
    },
    #[error(transparent)]
    Core(#[from] srlab_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;
