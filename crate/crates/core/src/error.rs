//! Crate-wide error type.

/// Errors surfaced by loading, fitting, smoothing, inference, and simulation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A value outside the declared family support, or an invalid nuisance
    /// parameter (e.g. `psi != 1` for a family without dispersion).
    #[error("domain error: {0}")]
    Domain(String),

    /// An ordered-probit category probability fell below the 1e-300 floor
    /// where a derivative was required.
    #[error("category probability underflow (below 1e-300)")]
    Underflow,

    /// Invalid configuration (group counts, tolerances, schema, thresholds).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// CSV ingestion failure with the offending location.
    #[error("load error at {location}: {msg}")]
    Load { location: String, msg: String },

    /// The design matrix (possibly weighted) is not of full column rank.
    /// `column` is 0-based into the covariate list.
    #[error("design matrix is rank deficient at column {column}")]
    RankDeficient { column: usize },

    /// Rank deficiency with the offending column resolved to its name.
    #[error("design matrix is rank deficient at covariate column '{name}'")]
    RankDeficientNamed { name: String },

    /// A safeguarded Newton update exhausted its step halvings without
    /// reaching a non-decreasing objective.
    #[error("no progress in {block} update at sweep {sweep}: {detail}")]
    NoProgress {
        block: String,
        sweep: usize,
        detail: String,
    },

    /// Estimation-level failure (absent category, propagated block error).
    #[error("estimation error: {0}")]
    Estimation(String),

    /// Prediction-level failure (unknown level without the allow flag).
    #[error("prediction error: {0}")]
    Prediction(String),

    /// Simulation harness failure (too many failed replications, bad design).
    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable kind tag used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Underflow => "underflow",
            Error::Config(_) => "config",
            Error::Load { .. } => "load",
            Error::RankDeficient { .. } | Error::RankDeficientNamed { .. } => "rank_deficient",
            Error::NoProgress { .. } => "no_progress",
            Error::Estimation(_) => "estimation",
            Error::Prediction(_) => "prediction",
            Error::Simulation(_) => "simulation",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
