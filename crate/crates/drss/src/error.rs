//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite covariate at row {row}, column {col}")]
    NonFiniteCovariate { row: usize, col: usize },

    #[error("row {row} is labeled but its outcome is absent or non-finite")]
    MissingLabeledOutcome { row: usize },

    #[error("no labeled observations")]
    EmptyLabeledSet,

    #[error("invalid fold count K={k} for N={n} (need 2 <= K <= N)")]
    InvalidFoldCount { k: usize, n: usize },

    #[error("design matrix is rank deficient beyond pseudo-inverse tolerance")]
    RankDeficientDesign,

    #[error("empty tuning grid")]
    EmptyGrid,

    #[error("Gram matrix numerically singular even after ridge floor")]
    NumericallySingularGram,

    #[error("training complement of fold {fold} has no labeled rows")]
    NoLabeledInTrainingFold { fold: usize },

    #[error("offset logistic fit did not converge: {0}")]
    Separation(String),

    #[error("stratum {stratum} is empty")]
    EmptyStratum { stratum: u8 },

    #[error("propensity value {value} at row {row} is not strictly positive")]
    NonpositivePropensity { row: usize, value: f64 },

    #[error("propensity value at row {row} is >= 1; control-arm weight undefined")]
    DegeneratePropensityOne { row: usize },

    #[error("arm {arm} is empty in the training complement of fold {fold}")]
    EmptyArmInTrainingFold { fold: usize, arm: u8 },

    #[error("plug-in Jacobian is numerically singular (condition {cond:.3e})")]
    SingularJacobian { cond: f64 },

    #[error("alpha must lie strictly between 0 and 1, got {0}")]
    InvalidAlpha(f64),

    #[error("intercept calibration not bracketed on [{lo}, {hi}]")]
    CalibrationNotBracketed { lo: f64, hi: f64 },

    #[error("invalid simulation spec: {0}")]
    InvalidSpec(String),

    #[error("schema violation at row {row}: {message}")]
    SchemaViolation { row: usize, message: String },

    #[error("parse error: {0}")]
    ParseError(String),

    #[error("fold {fold}: {source}")]
    FoldFit {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("replication {rep}, cell {cell}: {source}")]
    Campaign {
        rep: usize,
        cell: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wrap an error with the cross-fitting fold it occurred in.
    pub fn in_fold(self, fold: usize) -> Error {
        Error::FoldFit {
            fold,
            source: Box::new(self),
        }
    }
}
