use thiserror::Error;

pub type Result<T> = std::result::Result<T, QpcError>;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum QpcError {
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("design is rank deficient (column {column} is collinear with earlier columns)")]
    RankDeficient { column: usize },

    #[error("column {column} has (near) zero variance")]
    DegenerateColumn { column: usize },

    #[error("predictor {column} is explained by its conditioning set (residual variance {sigma2:e})")]
    DegeneratePredictor { column: usize, sigma2: f64 },

    #[error("quantile solver did not converge after {iterations} iterations")]
    NotConverged { iterations: usize },

    #[error("candidate {candidate} is a member of its own conditioning set")]
    CandidateInConditioningSet { candidate: usize },

    #[error("mean check loss {loss:e} is not positive")]
    NonPositiveLoss { loss: f64 },

    #[error("no candidate could be scored at selection step {step}")]
    StalledSelection { step: usize },

    #[error("innovation covariance is not positive definite")]
    CovarianceNotPD,

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("unknown transform code {code} for series {series}")]
    UnknownTcode { series: String, code: i64 },

    #[error("series {series} has non-positive values but its transform takes logs")]
    NonPositiveForLog { series: String },

    #[error("unknown series {0}")]
    UnknownSeries(String),

    #[error("date filter selects no forecast origins")]
    EmptyFilter,

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for QpcError {
    fn from(e: std::io::Error) -> Self {
        QpcError::Io(e.to_string())
    }
}
