use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty vector")]
    EmptyVector,

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("insufficient patches: need at least 2, got {0}")]
    InsufficientPatches(usize),

    #[error("insufficient synthetic budget: T={patches} < 2M={min}")]
    InsufficientBudget { patches: usize, min: usize },

    #[error("component {component} has {members} synthetic members, need at least 2")]
    SparseComponent { component: usize, members: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("empty bag")]
    EmptyBag,

    #[error("AUC undefined: scores contain a single class")]
    AucUndefined,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("class unrepresentable: client {client} has zero prior for class {class}")]
    ClassUnrepresentable { client: usize, class: usize },

    #[error("too few slides: {0}")]
    TooFewSlides(String),

    #[error("bag file {path}: {reason}")]
    BagFormat { path: PathBuf, reason: String },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("slide {slide_id}: {source}")]
    Slide {
        slide_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("client {client}: {source}")]
    Client {
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn in_slide(self, slide_id: &str) -> Self {
        Error::Slide { slide_id: slide_id.to_string(), source: Box::new(self) }
    }

    pub(crate) fn in_client(self, client: usize) -> Self {
        Error::Client { client, source: Box::new(self) }
    }
}
