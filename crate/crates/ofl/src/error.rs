use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum OflError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message} at byte {offset}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },
    #[error("{0}")]
    Core(#[from] ofl_core::Error),
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    /// Bad arguments or inputs; maps to exit code 2.
    #[error("{0}")]
    Usage(String),
}

impl OflError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = OflError> = std::result::Result<T, E>;
