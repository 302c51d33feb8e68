use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular matrix: {0}")]
    SingularMatrix(String),

    #[error("state diverged at step {step}{}", sample.map(|s| format!(" (sample {s})")).unwrap_or_default())]
    DivergedState { step: usize, sample: Option<usize> },

    #[error("function evaluation returned non-finite values: {0}")]
    Evaluation(String),

    #[error("numeric overflow in layer `{layer}`")]
    NumericOverflow { layer: String },

    #[error("unknown {kind} `{name}`; registered: {}", available.join(", "))]
    NotFound {
        kind: &'static str,
        name: String,
        available: Vec<String>,
    },

    #[error("format error in {path:?}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Attaches a sample index to a diverged-state error.
    pub(crate) fn with_sample(self, sample: usize) -> Self {
        match self {
            Error::DivergedState { step, .. } => Error::DivergedState {
                step,
                sample: Some(sample),
            },
            other => other,
        }
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            Error::DivergedState { sample, .. } => Error::DivergedState { step, sample },
            other => other,
        }
    }
}
