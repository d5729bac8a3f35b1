use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("gram not positive definite (smallest eigenvalue {lambda_min:.3e})")]
    GramNotPd { lambda_min: f64 },

    #[error("matrix not positive definite: {0}")]
    NotPd(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    #[error("strategy saturates sequence: {0}")]
    StrategySaturated(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("below early-stop time: t = {t} < t0 = {t0}")]
    BelowEarlyStop { t: f64, t0: f64 },

    #[error("score returned non-finite values at step {step}")]
    NonFiniteScore { step: usize },

    #[error("precision budget infeasible: {0}")]
    PrecisionBudget(String),

    #[error("rank-deficient normal equations with zero ridge (bucket {bucket})")]
    RankDeficient { bucket: usize },

    #[error("degenerate candidate: {0}")]
    DegenerateCandidate(String),
}
