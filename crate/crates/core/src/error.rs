use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("malformed IDX file {path}: {reason}")]
    Idx { path: String, reason: String },

    #[error("numeric minimizer did not converge after {iterations} steps (last a={a}, b={b}, |grad|={grad_norm:e})")]
    NoConvergence {
        iterations: usize,
        a: f64,
        b: f64,
        grad_norm: f64,
    },

    #[error("missing adversarial fields for example {0}")]
    MissingAdversarial(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
