use std::path::PathBuf;

use crate::algorithms::UpdateReport;

pub type Result<T, E = HaroodError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum HaroodError {
    #[error("windowing error: {0}")]
    Windowing(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("registry error: {0}")]
    Registry(String),

    #[error("ingestion error in {}: {message}", file.display())]
    Ingestion { file: PathBuf, message: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("training diverged at step {}: total loss {}", .0.step_index, .0.total_loss)]
    Divergence(Box<UpdateReport>),

    #[error("batch error: {0}")]
    Batch(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("analysis error: {0}")]
    Analysis(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<HaroodError>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("yaml error: {0}")]
    Yaml(#[from] serde_yaml::Error),
}

impl HaroodError {
    pub fn ingestion(file: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        HaroodError::Ingestion {
            file: file.into(),
            message: message.into(),
        }
    }

    /// Wraps the error with a description of what was being attempted.
    pub fn context(self, context: impl Into<String>) -> Self {
        HaroodError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping any context wrappers.
    pub fn root(&self) -> &HaroodError {
        match self {
            HaroodError::Context { source, .. } => source.root(),
            other => other,
        }
    }
}
