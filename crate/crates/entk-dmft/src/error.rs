use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("covariance factorization failed for layer {layer}: {msg}")]
    Factorization { layer: usize, msg: String },

    #[error("non-finite value in layer {layer} at time step {step}")]
    NonFinite { layer: usize, step: usize },

    #[error("training diverged at step {step}: loss {loss:.3e} exceeds 1e6 (reduce dt)")]
    Diverged { step: usize, loss: f64 },

    #[error("singular resolvent in layer {layer}: {msg}; try a smaller dt or gamma0")]
    SingularResolvent { layer: usize, msg: String },

    #[error("config error at `{path}`: {msg}")]
    Config { path: String, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
