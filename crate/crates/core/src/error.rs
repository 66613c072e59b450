use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {what} at x = {x:?}")]
    NonFinite { what: &'static str, x: Vec<f64> },

    #[error("unknown problem `{0}`")]
    UnknownProblem(String),

    #[error("problem `{0}` has no analytic solution")]
    NoAnalyticSolution(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("limit ODE became unstable at t = {t}; reduce the time step")]
    Unstable { t: f64 },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
