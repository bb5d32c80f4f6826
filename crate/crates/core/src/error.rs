use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Reasons a model configuration is rejected.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigIssue {
    #[error("transition matrix is not aperiodic")]
    NotAperiodic,
    #[error("transition matrix must be square with at least one 1 per row")]
    MalformedTransition,
    #[error("the intermittent cell W0 must map to itself (transition[0][0] = 1)")]
    MissingFixedPoint,
    #[error("cell W0 must have at least one transition to another cell")]
    NoExitFromW0,
    #[error("hyperbolicity factor violated: {0}")]
    Hyperbolicity(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("point lies on a branch boundary of cell {cell} (coordinate {coord})")]
    BoundaryTie { cell: usize, coord: f64 },
    #[error("root finding did not converge: {0}")]
    Convergence(String),
    #[error("configuration error: {0}")]
    Config(#[from] ConfigIssue),
    #[error("boundary sequence exhausted: level beyond {0}")]
    SequenceExhausted(usize),
    #[error("return time exceeds cap {0}")]
    CapExceeded(u64),
    #[error("points are not on a common {0} leaf")]
    LeafMismatch(&'static str),
    #[error("point is not in the reference cell W1")]
    NotInBase,
    #[error("invalid tower level {level} (return time {ret})")]
    InvalidLevel { level: u64, ret: u64 },
    #[error("degenerate support: {0}")]
    DegenerateSupport(String),
    #[error("degenerate fitting window: {0}")]
    DegenerateWindow(String),
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("transition rows cannot be normalized (row {row}, sum {sum})")]
    MassLeak { row: usize, sum: f64 },
    #[error("power iteration did not converge, residual {residual:e}")]
    NoConvergence { residual: f64, history: Vec<f64> },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("negative density at grid cell {cell} (value {value:e})")]
    NegativeDensity { cell: usize, value: f64 },
}
