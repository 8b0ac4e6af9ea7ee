use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("control {value:?} lies outside the control set")]
    ControlOutsideSet { value: Vec<f64> },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Shape {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("time {t} is not on the grid (dt = {dt})")]
    OffGrid { t: f64, dt: f64 },

    #[error("ensemble mismatch: {0}")]
    EnsembleMismatch(String),

    #[error("state diverged on path {path} at step {step}")]
    Diverged { path: usize, step: usize },

    #[error("regression failed at step {step}: {reason}")]
    Regression { step: usize, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name: name.to_string(),
        reason: reason.into(),
    }
}

pub(crate) fn ensure_finite(what: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: what.to_string(),
        })
    }
}
