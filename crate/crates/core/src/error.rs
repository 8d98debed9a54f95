use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("image `{image_id}`: invalid {field}: {msg}")]
    Validation {
        image_id: String,
        field: &'static str,
        msg: String,
    },

    #[error("box covers no pixel centers")]
    DegenerateRegion,

    #[error("cannot normalize row {row}: norm {norm:e} below tolerance")]
    Normalization { row: usize, norm: f64 },

    #[error("non-finite gradient in parameter `{param}`")]
    Optimizer { param: String },

    #[error("gradient check: {0}")]
    Check(String),

    #[error("config: {0}")]
    Config(String),

    #[error("unknown image_id `{0}`")]
    UnknownImage(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn validation(image_id: &str, field: &'static str, msg: impl Into<String>) -> Self {
        Error::Validation {
            image_id: image_id.to_string(),
            field,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Config errors map to exit code 2 in the CLI, everything else that
    /// concerns inputs maps to 3.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
