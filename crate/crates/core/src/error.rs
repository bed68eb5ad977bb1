use thiserror::Error;

/// Errors raised across grid construction, modeling, training and evaluation.
#[derive(Error, Debug)]
pub enum CoherenceError {
    #[error("empty document")]
    EmptyDocument,
    #[error("invalid document {doc_id}: {reason}")]
    InvalidDocument { doc_id: String, reason: String },
    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),
    #[error("grid too short: k = {k} exceeds {rows} rows")]
    GridTooShort { k: usize, rows: usize },
    #[error("invalid reply structure: {0}")]
    InvalidReplyStructure(String),
    #[error("enumeration too large: {n} posts exceeds cap {cap}")]
    EnumerationTooLarge { n: usize, cap: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("filter wider than path count: n = {width} > P = {paths}")]
    FilterTooWide { width: usize, paths: usize },
    #[error("filter longer than input: m = {length} > {available}")]
    FilterTooLong { length: usize, available: usize },
    #[error("batch normalization needs at least 2 samples in training mode, got {0}")]
    BatchTooSmall(usize),
    #[error("gradient explosion: non-finite gradient in {0}")]
    GradientExplosion(String),
    #[error("backward called before forward")]
    NoForwardPass,
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("setting mismatch: {0}")]
    SettingMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoherenceError>;
