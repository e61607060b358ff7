use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    MalformedRow { line: usize, message: String },

    #[error("line {line}: unknown rating label `{label}`")]
    UnknownRating { line: usize, label: String },

    #[error("line {line}: entity `{entity}` has non-increasing dates ({date})")]
    NonMonotoneDates {
        line: usize,
        entity: String,
        date: chrono::NaiveDate,
    },

    #[error("line {line}: entity `{entity}` is rated `{label}` after default")]
    RatingAfterDefault {
        line: usize,
        entity: String,
        label: String,
    },

    #[error("invalid rating scale: {0}")]
    InvalidScale(String),

    #[error("sample {sample}, time {time}, row {row}: row sum {sum} deviates from 1 by more than {tol}")]
    RowSum {
        sample: usize,
        time: usize,
        row: usize,
        sum: f64,
        tol: f64,
    },

    #[error("sample {sample}, time {time}: entry ({row},{col}) = {value} is negative")]
    NegativeEntry {
        sample: usize,
        time: usize,
        row: usize,
        col: usize,
        value: f64,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("data period is shorter than one {span}-month window")]
    PeriodTooShort { span: u32 },

    #[error("variance needs at least 2 samples, got {0}")]
    TooFewSamples(usize),

    #[error("penalty weight lambda2 > 0 needs a reference series")]
    MissingReference,

    #[error("objective is not finite at the initial point")]
    NonFiniteObjective,

    #[error("rejection sampling exceeded {0} retries")]
    RetryCapExceeded(usize),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
