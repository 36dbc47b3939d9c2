use thiserror::Error;

/// Errors produced by the estimation toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("numerical overflow: {0}")]
    NumericalOverflow(String),

    #[error("degenerate record at step {step}: conditional state trace {trace:e} before renormalization")]
    DegenerateRecord { step: usize, trace: f64 },

    #[error("degenerate update at step {step}: total trace {trace:e}")]
    DegenerateUpdate { step: usize, trace: f64 },

    #[error("degenerate smoothing at t={t}: overlap {overlap:e}")]
    DegenerateSmoothing { t: f64, overlap: f64 },

    #[error("numerical instability: {0}")]
    NumericalInstability(String),

    #[error("unsupported scenario: {0}")]
    UnsupportedScenario(String),

    #[error("instance too large for enumeration: {0}")]
    TooLarge(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("scenario mismatch: {0}")]
    ScenarioMismatch(String),

    #[error("malformed file {path}: {message}")]
    Format { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Attaches a step index to errors raised inside a per-step routine.
    pub fn at_step(self, step: usize) -> Error {
        match self {
            Error::NumericalOverflow(msg) => Error::NumericalOverflow(format!("step {step}: {msg}")),
            Error::NumericalInstability(msg) => {
                Error::NumericalInstability(format!("step {step}: {msg}"))
            }
            Error::DegenerateUpdate { trace, .. } => Error::DegenerateUpdate { step, trace },
            other => other,
        }
    }

    /// True for errors that signal a numerically degenerate estimate rather than bad input.
    pub fn is_degenerate(&self) -> bool {
        matches!(
            self,
            Error::NumericalOverflow(_)
                | Error::DegenerateRecord { .. }
                | Error::DegenerateUpdate { .. }
                | Error::DegenerateSmoothing { .. }
                | Error::NumericalInstability(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
