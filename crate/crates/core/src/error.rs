use thiserror::Error;

/// Crate-wide error type. Variants carry enough context to diagnose a
/// failure from a log line without a debugger.
#[derive(Debug, Error)]
pub enum Error {
    /// A matrix or vector did not have the shape an operation requires.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: String,
        actual: String,
    },

    /// Closed-loop operation requested on a network whose input and output
    /// dimensions differ, or state/data lengths are inconsistent.
    #[error("alignment error: {0}")]
    Alignment(String),

    /// Readout weights requested before training.
    #[error("readout has not been trained")]
    NotTrained,

    /// A numerical routine failed to produce a usable result.
    #[error("numerical failure in {context}: {detail}")]
    Numerical {
        context: &'static str,
        detail: String,
    },

    /// An iterative solver exhausted its iteration budget.
    #[error("{context} did not converge within {iterations} iterations (residual {residual:.3e})")]
    Convergence {
        context: &'static str,
        iterations: usize,
        residual: f64,
    },

    /// A cycled assimilation run diverged (sustained off-attractor error).
    #[error("assimilation diverged at cycle {cycle} (nrmse {nrmse:.3})")]
    Diverged { cycle: usize, nrmse: f64 },

    /// Invalid configuration or construction parameters.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Domain decomposition constraints violated.
    #[error("invalid layout: {0}")]
    Layout(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("file format error in {path}: {detail}")]
    Format { path: String, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(
        context: &'static str,
        expected: impl Into<String>,
        actual: impl Into<String>,
    ) -> Self {
        Error::Dimension {
            context,
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub fn numerical(context: &'static str, detail: impl Into<String>) -> Self {
        Error::Numerical {
            context,
            detail: detail.into(),
        }
    }
}
