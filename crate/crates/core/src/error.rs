use thiserror::Error;

/// Errors raised across the toolkit.
///
/// Every variant maps to a stable machine-readable code through [`Error::code`],
/// which the CLI forwards in its JSON error objects.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid query: {0}")]
    InvalidQuery(String),

    #[error("no sign change of the bound polynomial on (0,1) for k={k}, N={n}")]
    NoBracket { k: usize, n: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid set description: {0}")]
    InvalidSet(String),

    #[error("constraint intersection appears to be empty: {0}")]
    InfeasibleSet(String),

    #[error("solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("all sampled pairs coincide; cannot estimate monotonicity")]
    DegeneratePairs,

    #[error("agent {agent} has no gradient oracle")]
    MissingGradient { agent: usize },

    #[error("no uncertainty samples supplied")]
    EmptySamples,

    #[error("operator does not look strongly monotone (estimated modulus {alpha_hat:.3e})")]
    NonMonotoneSuspected { alpha_hat: f64 },

    #[error("sampler failed: {0}")]
    SamplerFailure(String),

    #[error("covariance is not positive semidefinite (min eigenvalue {min_eigenvalue:.3e})")]
    NonPsdCovariance { min_eigenvalue: f64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("negative demand {value} at row {row}, column {col}")]
    NegativeDemand { row: usize, col: usize, value: f64 },

    #[error("row {row} has {got} columns, expected {expected}")]
    InconsistentWidth { row: usize, expected: usize, got: usize },

    #[error("need at least 2 profiles to fit a Gaussian, got {rows}")]
    InsufficientData { rows: usize },

    #[error("covariance factorization failed: {0}")]
    FactorizationFailure(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{stage}: {source}")]
    Staged {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Stable kebab-case code for machine consumption.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidQuery(_) => "invalid-query",
            Error::NoBracket { .. } => "no-bracket",
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::InvalidSet(_) => "invalid-set",
            Error::InfeasibleSet(_) => "infeasible-set",
            Error::NotConverged { .. } => "not-converged",
            Error::DegeneratePairs => "degenerate-pairs",
            Error::MissingGradient { .. } => "missing-gradient",
            Error::EmptySamples => "empty-samples",
            Error::NonMonotoneSuspected { .. } => "non-monotone-suspected",
            Error::SamplerFailure(_) => "sampler-failure",
            Error::NonPsdCovariance { .. } => "non-psd-covariance",
            Error::Parse(_) => "parse-error",
            Error::NegativeDemand { .. } => "negative-demand",
            Error::InconsistentWidth { .. } => "inconsistent-width",
            Error::InsufficientData { .. } => "insufficient-data",
            Error::FactorizationFailure(_) => "factorization-failure",
            Error::InvalidInput(_) => "invalid-input",
            Error::Io(_) => "io-error",
            Error::Csv(_) => "parse-error",
            Error::Json(_) => "parse-error",
            Error::Staged { source, .. } => source.code(),
        }
    }

    /// Innermost pipeline stage, if the error was labelled.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Staged { stage, source } => source.stage().or(Some(stage)),
            _ => None,
        }
    }

    /// The error without stage labels.
    pub fn root(&self) -> &Error {
        match self {
            Error::Staged { source, .. } => source.root(),
            e => e,
        }
    }
}

/// Labels errors with the pipeline stage that raised them.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T, E: Into<Error>> StageExt<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Staged {
            stage,
            source: Box::new(e.into()),
        })
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}
