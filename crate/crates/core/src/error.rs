use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("config: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    Usage(String),
    #[error("format: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for failures caused by NaN/Inf or divergence.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            CoreError::Numeric(_) | CoreError::Tensor(tensor::TensorError::NonFinite { .. })
        )
    }
}

/// Lets core routines run inside tensor-level closures (e.g. gradient checks).
impl From<CoreError> for tensor::TensorError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Tensor(t) => t,
            other => tensor::TensorError::Usage(other.to_string()),
        }
    }
}
