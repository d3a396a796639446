use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{clusters} clusters cannot be split equally across {sequences} sequences")]
    NonDivisibleAllocation { clusters: usize, sequences: usize },

    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    #[error("{what} index {index} out of range 1..={max}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        max: usize,
    },

    #[error("invalid variance component: {0}")]
    InvalidVariance(String),

    #[error("gamma must lie in [0, 1), got {0}")]
    InvalidGamma(f64),

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("estimand undefined: {0}")]
    UndefinedEstimand(String),

    #[error("design matrix is singular on the active rows")]
    SingularDesign,

    #[error("variance component search did not converge after {iterations} iterations")]
    NonConvergence { iterations: usize },

    #[error("operation requires a {expected} fit, got {found}")]
    WrongStructure {
        expected: &'static str,
        found: &'static str,
    },

    #[error("fit carries no maximized log-likelihood")]
    MissingLikelihood,

    #[error("cluster-robust variance needs at least 2 clusters, got {0}")]
    TooFewClusters(usize),

    #[error("leverage adjustment singular for cluster {cluster}")]
    LeverageSingular { cluster: usize },
}
