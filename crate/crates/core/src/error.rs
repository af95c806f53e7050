use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("empty vector")]
    EmptyVector,
    #[error("degenerate vector: norm {norm:e} <= eps {eps:e}")]
    DegenerateVector { norm: f64, eps: f64 },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("non-positive image dimensions {width}x{height}")]
    InvalidImageDims { width: f64, height: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("insufficient queries: {queries} queries for {targets} targets")]
    InsufficientQueries { queries: usize, targets: usize },
    #[error("oracle size limit: {targets} targets exceeds {limit}")]
    OracleSizeLimit { targets: usize, limit: usize },
    #[error("class {class} out of range for {n_classes} classes")]
    ClassOutOfRange { class: usize, n_classes: usize },
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("embedding {index} is not unit norm (norm {norm})")]
    NonUnitEmbedding { index: usize, norm: f64 },
    #[error("invalid pairing: {0}")]
    InvalidPairing(String),
    #[error("invalid IoU threshold {0}")]
    InvalidThreshold(f64),
    #[error("empty ground truth")]
    EmptyGroundTruth,
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
}
