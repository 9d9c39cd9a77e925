use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input outside the map domain: {0}")]
    Domain(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("graph contains a cycle: {0}")]
    Cycle(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("density is not defined for point-mass mechanism at node {node}")]
    UnsupportedDensity { node: usize },

    #[error("noise abduction failed at node {node}: {reason}")]
    Abduction { node: usize, reason: String },

    #[error("non-finite value produced by mechanism at node {node}")]
    NonFinite { node: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate column {column}: zero variance")]
    DegenerateColumn { column: usize },

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Divergence { epoch: usize, reason: String },

    #[error("selection failed: {0}")]
    Selection(String),

    #[error("{path}: row {row}: {reason}")]
    Parse { path: String, row: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Whether the error stems from invalid user input rather than a failure
    /// while computing. The CLI maps these to exit code 1.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Parse { .. } | Error::Dimension(_) | Error::Capacity(_)
        )
    }
}
