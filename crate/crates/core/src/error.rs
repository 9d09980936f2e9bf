use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SgoifError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is not positive definite (pivot {pivot} = {value:.3e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("matrix is not symmetric (entry ({row}, {col}) differs by {gap:.3e})")]
    NotSymmetric { row: usize, col: usize, gap: f64 },

    #[error("non-finite entry at index {0}")]
    NonFinite(usize),

    #[error("infeasible label noise: {0}")]
    InfeasibleNoise(String),

    #[error("curvature backend mismatch: {0}")]
    BackendMismatch(String),

    #[error("singular preconditioner: diagonal entry {index} = {value:.3e}")]
    SingularPreconditioner { index: usize, value: f64 },

    #[error("Neumann series diverges: contraction estimate q = {q:.4} >= 1")]
    DivergentSeries { q: f64 },

    #[error("non-finite IHVP iterate for anchor {anchor}")]
    NonFiniteIterate { anchor: usize },

    #[error("projected system Q^T H Q is singular")]
    SingularProjectedSystem,

    #[error("curvature breakdown: p^T H p = {0:.3e} <= 0")]
    CurvatureBreakdown(f64),

    #[error("every anchor has a zero IHVP column")]
    AllAnchorsZero,

    #[error("Gram matrix is singular (lambda_min = {0:.3e})")]
    SingularGram(f64),

    #[error("empirical-Bernstein interval needs at least 2 probes, have {0}")]
    InsufficientProbes(usize),

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("snapshot format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("step {step}, anchor {anchor:?}: {source}")]
    Step {
        step: usize,
        anchor: Option<usize>,
        #[source]
        source: Box<SgoifError>,
    },
}

impl From<std::io::Error> for SgoifError {
    fn from(err: std::io::Error) -> Self {
        SgoifError::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, SgoifError>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(SgoifError::DimensionMismatch { expected, got });
    }
    Ok(())
}
