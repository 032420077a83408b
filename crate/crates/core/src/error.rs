use thiserror::Error;

/// Errors raised anywhere in the estimation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("argument error: {0}")]
    Argument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("structure error: {0}")]
    Structure(String),

    #[error("numerical error in cluster {cluster}: {message}")]
    Numerical { cluster: i64, message: String },

    #[error("numerical error: {0}")]
    Singular(String),

    #[error("resource error: {0}")]
    Resource(String),

    #[error("convergence error in {stage}: {message}")]
    Convergence {
        stage: &'static str,
        message: String,
        /// Objective or score norms recorded at each iteration.
        trace: Vec<f64>,
    },

    #[error("separation detected: {0}")]
    Separation(String),

    #[error("boundary error: {0}")]
    Boundary(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("study error: {0}")]
    Study(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of an iterative solver (as opposed to bad input).
    pub fn is_convergence(&self) -> bool {
        matches!(
            self,
            Error::Convergence { .. } | Error::Separation(_) | Error::Study(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
