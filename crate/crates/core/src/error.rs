use thiserror::Error;

/// Errors raised by the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("degenerate local fit at {point:?}: {reason}")]
    DegenerateFit { point: Vec<f64>, reason: String },

    #[error("solver did not converge after {iterations} iterations (objective {objective})")]
    NonConvergence {
        iterations: usize,
        objective: f64,
        last_beta: Vec<f64>,
    },

    #[error("empty sample over the complementary axes at (t1 = {t1}, tu = {tu})")]
    EmptySample { t1: f64, tu: f64 },

    #[error("denominator {value:e} below floor {floor:e} at node {node:?}")]
    DenominatorFloor {
        value: f64,
        floor: f64,
        node: Vec<f64>,
    },

    #[error("empty v-neighborhood at v = {0}")]
    EmptyNeighborhood(f64),

    #[error("quadrature did not reach tolerance {tol:e} (change {change:e})")]
    Quadrature { tol: f64, change: f64 },

    #[error("linear program failed: {0}")]
    LinearProgram(String),

    #[error("experiment aborted: {failed} of {total} cells failed")]
    ExperimentAborted { failed: usize, total: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// True for failures of the estimator itself, as opposed to bad input.
    pub fn is_estimation(&self) -> bool {
        matches!(
            self,
            Error::DegenerateFit { .. }
                | Error::NonConvergence { .. }
                | Error::EmptySample { .. }
                | Error::DenominatorFloor { .. }
                | Error::EmptyNeighborhood(_)
                | Error::Quadrature { .. }
                | Error::LinearProgram(_)
                | Error::ExperimentAborted { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
