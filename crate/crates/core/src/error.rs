use thiserror::Error;

/// Errors raised by model construction, filtering, sampling and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate baseline: {0}")]
    DegenerateBaseline(String),

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("policy constraint violated: {0}")]
    Constraint(String),

    #[error("grid does not cover the state mass: {0}")]
    GridCoverage(String),

    #[error("all candidate likelihoods degenerate for series {series} at iteration {iteration}")]
    DegenerateLikelihood { series: usize, iteration: usize },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context { context: context.into(), source: Box::new(self) }
    }

    /// True when the failure comes from the numerics (degenerate filters,
    /// infeasible policies, uncovered grids) rather than from bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::DegenerateLikelihood { .. } | Error::Constraint(_) | Error::GridCoverage(_) => {
                true
            }
            Error::Context { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
