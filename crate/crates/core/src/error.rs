use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid category count {0}: need at least 2 categories")]
    InvalidCategoryCount(usize),

    #[error("invalid category {category}: tree covers 0..{n}")]
    InvalidCategory { category: usize, n: usize },

    #[error("invalid path: {0}")]
    InvalidPath(String),

    #[error("invalid prefix of length {len}: tree depth is {depth}, internal nodes end at length {max}")]
    InvalidPrefix { len: usize, depth: usize, max: usize },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("dataset spec error: {0}")]
    Spec(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite loss at epoch {epoch}, batch {batch}; diagnostics in {}", .diagnostics.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "<not written>".into()))]
    NanLoss {
        epoch: usize,
        batch: usize,
        diagnostics: Option<PathBuf>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("ablation incomplete; completed variants: {completed:?}; first failure: {cause}")]
    PartialAblation {
        completed: Vec<String>,
        cause: Box<Error>,
    },

    #[error("replay mismatch for {0}")]
    ReplayMismatch(String),

    #[error("csv error: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
