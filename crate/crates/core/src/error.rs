use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty attention row")]
    EmptyAttentionRow,

    #[error("k = {k} is out of range for a row of length {len}")]
    KOutOfRange { k: usize, len: usize },

    #[error("order statistic index {index} is out of range for a row of length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid workload spec: {0}")]
    InvalidWorkload(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("no calibrated rows for layer {layer}, head {head}")]
    NoCalibratedRows { layer: usize, head: usize },

    #[error("rank-deficient design matrix for layer {layer}, head {head}")]
    RankDeficient { layer: usize, head: usize },

    #[error("k = {k} is outside the achievable range [{k_min}, {k_max}]")]
    KNotAchievable { k: f64, k_min: f64, k_max: f64 },

    #[error("invalid interval input: {0}")]
    InvalidIntervals(String),

    #[error("invalid compensation config: {0}")]
    InvalidConfig(String),

    #[error("no calibrated compensation value for layer {layer}, head {head}, row {row_id}")]
    MissingCompensation { layer: usize, head: usize, row_id: usize },

    #[error("threshold store: {0}")]
    Store(String),

    #[error("report: {0}")]
    Report(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
