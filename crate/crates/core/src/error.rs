use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum DrtlError {
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("synthesis failed: {0}")]
    Synthesis(String),
    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },
    #[error("dataset item {index}: {reason}")]
    Item { index: usize, reason: String },
    #[error("sampling error: {0}")]
    Sampling(String),
    #[error("relation error: {0}")]
    Relation(String),
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing artifact {path}; run the `{stage}` stage first")]
    MissingArtifact { stage: String, path: PathBuf },
    #[error("report error: {0}")]
    Report(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = DrtlError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DrtlError {
    let path = path.into();
    move |source| DrtlError::Io { path, source }
}
