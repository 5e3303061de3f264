use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid design: {0}")]
    InvalidDesign(String),

    #[error("singular design: feature matrix condition number {condition:.3e} exceeds {cap:.1e}")]
    SingularDesign { condition: f64, cap: f64 },

    #[error("G-optimal design not certified after {iterations} iterations (sigma = {sigma:.6})")]
    DesignCapExceeded { sigma: f64, iterations: usize },

    #[error("value iteration did not converge after {iterations} iterations (last change {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("instance generator gave up after {attempts} attempts (best gap {best_gap:.4})")]
    ResampleBudgetExhausted { attempts: usize, best_gap: f64 },

    #[error("degenerate gap: gap + epsilon must be positive (got {0})")]
    DegenerateGap(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("absolute continuity violated at step {step}, pair ({state}, {action}): {detail}")]
    AbsoluteContinuityViolated {
        step: usize,
        state: usize,
        action: usize,
        detail: String,
    },

    #[error("support violation: {0}")]
    SupportViolation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
