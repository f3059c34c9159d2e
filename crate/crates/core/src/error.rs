use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("degenerate feature: zero vector cannot be normalized")]
    DegenerateFeature,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("classifier already carries a dummy column")]
    DummyAlreadyPresent,

    #[error("classifier has no dummy column")]
    DummyMissing,

    #[error("invalid classifier: {0}")]
    Classifier(String),

    #[error("invalid synthetic spec: {0}")]
    SyntheticSpec(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("cannot parse config: {0}")]
    ConfigParse(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("training diverged at stage {stage}, epoch {epoch}, step {step}: loss = {loss}")]
    Divergence {
        stage: u8,
        epoch: usize,
        step: usize,
        loss: f64,
    },

    #[error("analysis error: {0}")]
    Analysis(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
