use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed container file. `position` is an absolute byte offset into
    /// the file.
    #[error("invalid checkpoint{}: {message} (byte {position})", tensor.as_ref().map(|t| format!(" tensor {t:?}")).unwrap_or_default())]
    Format {
        tensor: Option<String>,
        position: u64,
        message: String,
    },

    #[error("tensor {name:?}: {message}")]
    Tensor { name: String, message: String },

    #[error("no tensor named {0:?}")]
    MissingTensor(String),

    #[error("checkpoints do not align: {}", .0.join("; "))]
    Alignment(Vec<String>),

    #[error("invalid component map: {0}")]
    ComponentMap(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// The supplied singular values do not reach the requested tail bound;
    /// recompute with more factors.
    #[error("need more factors: tail energy ratio {tail_ratio:e} exceeds {bound:e} with {available} singular values")]
    NeedMoreFactors {
        available: usize,
        tail_ratio: f64,
        bound: f64,
    },

    #[error("model: {0}")]
    Model(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(tensor: Option<&str>, position: u64, message: impl Into<String>) -> Self {
        Self::Format {
            tensor: tensor.map(str::to_owned),
            position,
            message: message.into(),
        }
    }

    pub(crate) fn tensor(name: &str, message: impl Into<String>) -> Self {
        Self::Tensor {
            name: name.to_owned(),
            message: message.into(),
        }
    }

    /// Short machine-readable category, used by the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Tensor { .. } => "tensor",
            Error::MissingTensor(_) => "missing_tensor",
            Error::Alignment(_) => "alignment",
            Error::ComponentMap(_) => "component_map",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFinite(_) => "non_finite",
            Error::NeedMoreFactors { .. } => "need_more_factors",
            Error::Model(_) => "model",
            Error::Json(_) => "json",
        }
    }
}
