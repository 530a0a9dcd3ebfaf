use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("ingestion error: {0}")]
    Ingestion(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("empty region")]
    EmptyRegion,
    #[error("region out of bounds: {0}")]
    Bounds(String),
    #[error("bundle format error: {0}")]
    BundleFormat(String),
    #[error("empty bundle")]
    EmptyBundle,
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("query error: {0}")]
    Query(String),
    #[error("at least 2 clusters are required, got {0}")]
    InsufficientClusters(usize),
    #[error("cluster `{name}` has {size} members, minimum is {min}")]
    ClusterTooSmall { name: String, size: usize, min: usize },
    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("training diverged at epoch {epoch}")]
    Training {
        epoch: usize,
        history: Box<crate::sparse::TrainHistory>,
    },
}
