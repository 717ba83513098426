use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("shape mismatch in {context}: {detail}")]
    Shape { context: &'static str, detail: String },
    #[error("invalid argument for {context}: {detail}")]
    Invalid { context: &'static str, detail: String },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("episode error: {0}")]
    Episode(String),
    #[error("checkpoint version {found} unsupported (this build reads version {supported})")]
    CheckpointVersion { found: u32, supported: u32 },
    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training aborted: {0}")]
    Train(String),
    #[error(transparent)]
    Autograd(#[from] framecast_autograd::AutogradError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(context: &'static str, detail: impl Into<String>) -> Self {
        CoreError::Shape {
            context,
            detail: detail.into(),
        }
    }

    pub fn invalid(context: &'static str, detail: impl Into<String>) -> Self {
        CoreError::Invalid {
            context,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
