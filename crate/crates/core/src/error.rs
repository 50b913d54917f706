use thiserror::Error;

/// Errors produced by the planner library and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("GP fit failed: kernel matrix not positive definite after jitter up to {max_jitter:e}")]
    Fit { max_jitter: f64 },

    #[error("degenerate ICR geometry: y_icr_r - y_icr_l = {0:e}")]
    DegenerateIcr(f64),

    #[error("scenario generation failed: {0}")]
    ScenarioGeneration(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("model file error: {0}")]
    ModelFormat(String),

    #[error("simulation aborted: {0}")]
    Simulation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
