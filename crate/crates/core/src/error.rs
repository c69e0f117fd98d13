use thiserror::Error;

use crate::model::ModelId;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by fitting, testing and simulation routines.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("unknown model code `{0}`; expected one of EEE, VEE, EVE, EEV, VVE, VEV, EVV, VVV")]
    InvalidModel(String),

    #[error("{0} is the unconstrained alternative and has no null hypothesis")]
    NotANullHypothesis(ModelId),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("component {component} collapsed: effective size {weight:.4} is below {min_weight}")]
    ComponentCollapse {
        component: usize,
        weight: f64,
        min_weight: f64,
        /// Log-likelihood values reached before the collapse.
        trace: Vec<f64>,
    },

    #[error("degenerate scatter matrix: {0}")]
    DegenerateScatter(String),

    #[error("all component densities underflowed for observation {0}")]
    NumericalUnderflow(usize),

    #[error("invalid input to ordered eigenvalue projection: {0}")]
    InvalidProjection(String),

    #[error("VVV log-likelihood {l_vvv} is below the nested model's {l_m}")]
    DominanceViolation { l_m: f64, l_vvv: f64 },

    #[error("(1 - alpha)(R + 1) is not an integer for alpha = {alpha}, R = {replicates}; try R = {suggestion}")]
    InvalidBootstrapSize {
        alpha: f64,
        replicates: usize,
        suggestion: usize,
    },

    #[error("bootstrap unstable: {failed} of {total} replicates failed")]
    BootstrapUnstable { failed: usize, total: usize },

    #[error("incomplete input: {0}")]
    IncompleteInput(String),

    #[error("shape parameter {0} outside (0, 1]")]
    InvalidShape(f64),

    #[error("overlap {target} is unreachable; the largest attainable overlap is {max}")]
    UnreachableOverlap { target: f64, max: f64 },
}

impl Error {
    /// True for failures of the numerics (as opposed to bad input or configuration).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite(_)
                | Error::ComponentCollapse { .. }
                | Error::DegenerateScatter(_)
                | Error::NumericalUnderflow(_)
                | Error::DominanceViolation { .. }
                | Error::BootstrapUnstable { .. }
        )
    }
}
