use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("relative error undefined: reference field has zero norm")]
    UndefinedError,

    #[error("newton failed to converge at step {step} (t = {t}): residual {residual:.3e} after {iterations} iterations")]
    StepFailure {
        step: usize,
        t: f64,
        iterations: usize,
        residual: f64,
        state: Vec<f64>,
    },

    #[error("training diverged at epoch {epoch}: loss is not finite (parameter norm {param_norm:.3e})")]
    TrainingDiverged { epoch: usize, param_norm: f64 },

    #[error("closure model error: {0}")]
    Closure(String),

    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
