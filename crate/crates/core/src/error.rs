use thiserror::Error;

/// Errors raised by the dynamics, simulation, analysis and synthesis layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input out of domain: {0}")]
    InputDomain(String),

    #[error("mass matrix ill-conditioned (condition estimate {0:.3e})")]
    Conditioning(f64),

    #[error("impact map singular at q- = {q:?}")]
    ImpactSingular { q: Vec<f64> },

    #[error("decoupling matrix singular at t = {t}")]
    ControllerSingular { t: f64 },

    #[error("no guard crossing before t = {t_max}")]
    GuardMissed { t_max: f64 },

    #[error("robot fell at t = {t}: {reason}")]
    Fell { t: f64, reason: String },

    #[error("step does not complete from this state: {0}")]
    OutsideDomain(String),

    #[error("reconstruction infeasible: {0}")]
    Reconstruction(String),

    #[error("fixed point not found after {iterations} iterations (best residual {best_residual:.3e})")]
    FixedPointNotFound { iterations: usize, best_residual: f64 },

    #[error("gait synthesis failed: {0}")]
    SynthesisFailed(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid gait: {0}")]
    InvalidGait(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures that mean the robot left the set of states where a
    /// step completes (as opposed to numerical or usage failures).
    pub fn is_escape(&self) -> bool {
        matches!(
            self,
            Error::GuardMissed { .. } | Error::Fell { .. } | Error::OutsideDomain(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
