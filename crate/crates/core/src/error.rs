use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("input not divisible: {0}")]
    IndivisibleInput(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("variable does not belong to this tape")]
    NoTape,

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("dangling reference: {0}")]
    DanglingReference(String),

    #[error("no statistics for category {0}")]
    MissingStats(String),

    #[error("dataset is empty")]
    DatasetEmpty,

    #[error("non-finite loss at iteration {iteration}: {loss}")]
    NonFiniteLoss { iteration: usize, loss: f64 },

    #[error("augmentation could not reach target for category {category}: {achieved}/{target}")]
    AugmentationStalled { category: String, achieved: usize, target: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by bad user input (configs, files, parameters)
    /// as opposed to failures while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::ShapeMismatch { .. }
                | Error::InvalidParam(_)
                | Error::IndivisibleInput(_)
                | Error::Parse(_)
                | Error::DanglingReference(_)
                | Error::MissingStats(_)
                | Error::DatasetEmpty
                | Error::Json(_)
        )
    }
}
