use thiserror::Error;

#[derive(Debug, Error)]
pub enum M2mError {
    #[error("dimensions {height}x{width} are not divisible by scale {scale}")]
    IndivisibleDimensions {
        height: usize,
        width: usize,
        scale: usize,
    },
    #[error("target {target:?} is not an integer multiple of source {source_dims:?}")]
    NonMultipleTarget {
        source_dims: (usize, usize),
        target: (usize, usize),
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("reference distribution has a zero entry at index {0}")]
    ZeroPrior(usize),
    #[error("expected {expected} patches, got {got}")]
    PatchCount { expected: usize, got: usize },
    #[error("{modes} modes exceed the representable spectrum of a {height}x{width} grid")]
    ModeOverflow {
        modes: usize,
        height: usize,
        width: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("prior has {got} entries but the router has {expected} experts")]
    PriorDimension { expected: usize, got: usize },
    #[error("top-k value {k} out of range 1..={num_experts}")]
    TopKOutOfRange { k: usize, num_experts: usize },
    #[error("ground truth has zero norm")]
    ZeroNormTruth,
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("training diverged at epoch {epoch}: {what}")]
    Diverged { epoch: usize, what: String },
    #[error("linear solver did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("CFL condition violated: {0}")]
    Cfl(String),
    #[error("data format error: {0}")]
    Format(String),
    #[error("missing data: {0}")]
    Missing(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, M2mError>;
