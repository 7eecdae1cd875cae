use thiserror::Error;

/// Errors raised by the estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid misclassification rates (p0={p0}, p1={p1}): need p0, p1 >= 0 and p0 + p1 < 1")]
    InvalidRates { p0: f64, p1: f64 },

    #[error("rates are degenerate: |1 - p0 - p1| = {0:e}")]
    DegenerateRates(f64),

    #[error("linear system I - lambda*G is singular (rcond = {rcond:e})")]
    SingularSystem { rcond: f64 },

    #[error("matrix {name} is rank deficient (rcond = {rcond:e})")]
    RankDeficient { name: String, rcond: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("phi cell {cell} has no pairs in the sample")]
    EmptyPhiCell { cell: u8 },

    #[error("phi does not shift link formation: {0}")]
    NoVariation(String),

    #[error("negative discriminant in rate quadratic ({0:e})")]
    NegativeDiscriminant(f64),

    #[error("oracle variant requires the true network")]
    MissingTruth,

    #[error("variant requires valid misclassification-rate estimates: {0}")]
    MissingRates(String),

    #[error("explicit enumeration for n = {n} exceeds the cap n <= {cap}")]
    TooLarge { n: usize, cap: usize },

    #[error("all {0} replications failed")]
    AllReplicationsFailed(usize),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: u64,
        msg: String,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("schema version error: {0}")]
    Version(String),

    #[error("{path}: {source}")]
    File {
        path: String,
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerics (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularSystem { .. }
                | Error::RankDeficient { .. }
                | Error::NoVariation(_)
                | Error::NegativeDiscriminant(_)
                | Error::DegenerateRates(_)
                | Error::AllReplicationsFailed(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
