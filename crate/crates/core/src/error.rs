use thiserror::Error;

use crate::special::SpecialError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Special(#[from] SpecialError),

    #[error("invalid Dirichlet parameters: {0}")]
    InvalidAlpha(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("class {class} is out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite gradient: {0}")]
    NonFiniteGradient(String),

    #[error("unlabeled pool too small: need {needed}, have {available}")]
    PoolTooSmall { needed: usize, available: usize },

    #[error("labeling budget exhausted: requested {requested}, remaining {remaining}")]
    BudgetExhausted { requested: usize, remaining: usize },

    #[error("AUROC is undefined without both positive and negative samples")]
    UndefinedAuroc,

    #[error("invalid sampling schedule: {0}")]
    Schedule(String),

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown sample id {0}")]
    UnknownSample(usize),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
