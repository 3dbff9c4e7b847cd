use thiserror::Error;

/// Errors raised by the numerical routines of this crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlowError {
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("matrix is not symmetric (max asymmetry {asym:e})")]
    NotSymmetric { asym: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("quadrature degree {0} outside 1..=64")]
    DegreeOutOfRange(usize),
    #[error("tensor rule needs {nodes} nodes, budget is {budget}")]
    NodeBudgetExceeded { nodes: u128, budget: usize },
    #[error("non-finite value in {0}")]
    NonFiniteValue(String),
    #[error("model is singular at the evaluation point")]
    SingularPoint,
    #[error("model does not provide {0}")]
    Unsupported(&'static str),
    #[error("flow diverged at t = {t}: {reason}")]
    DivergedFlow {
        t: f64,
        reason: String,
        component: Option<usize>,
    },
    #[error("integration exceeded {steps} steps (reached t = {t})")]
    MaxStepsExceeded { steps: usize, t: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, FlowError>;

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(FlowError::DimensionMismatch { expected, found })
    }
}

pub(crate) fn check_finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(FlowError::NonFiniteValue(what.to_string()))
    }
}
