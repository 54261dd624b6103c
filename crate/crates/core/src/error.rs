use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("load error: {0}")]
    Load(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("stencil error: {0}")]
    Stencil(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("evaluation error: derivative of `{variable}` of order {order} is not available")]
    MissingDerivative { variable: String, order: usize },

    #[error("evaluation error: channel `{0}` does not exist")]
    MissingChannel(String),

    #[error("singularity: inverse coordinate of `{axis}` hits zero at index {index}")]
    Singularity { axis: String, index: usize },

    #[error("invalid equation: {0}")]
    InvalidEquation(String),

    #[error("degenerate equation: {0}")]
    Degenerate(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("lasso did not converge after {sweeps} sweeps (last change {last_change:e})")]
    NotConverged {
        sweeps: usize,
        last_change: f64,
        last_iterate: Vec<f64>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("sampling infeasible: {0}")]
    SamplingInfeasible(String),

    #[error("newton iteration failed at t={t}: {message}")]
    Newton { t: f64, message: String },

    #[error("stiffness detected at t={t}: step size {step:e} underflows")]
    Stiff { t: f64, step: f64 },

    #[error("divergence: state became non-finite after t={last_good}")]
    Divergence { last_good: f64 },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
