use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("matrix entry ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },

    #[error("channel matrix is identically zero (subband {subband:?})")]
    ZeroChannel { subband: Option<usize> },

    #[error("invalid path set: {0}")]
    InvalidPaths(String),

    #[error("reference vector is orthogonal to the dominant eigenspace")]
    DegenerateProjection,

    #[error("benchmark {link} has no unique {axis}-sum maximum")]
    BenchmarkAmbiguous { link: &'static str, axis: &'static str },

    #[error("codec input {value} at index {index} lies outside [0, 1]")]
    RangeViolation { index: usize, value: f64 },

    #[error("row {row} has zero norm")]
    ZeroRow { row: usize },

    #[error("magnitude field is constant; Pearson correlation undefined")]
    ConstantInput,

    #[error("empty sample set")]
    Empty,

    #[error("non-finite training loss at epoch {epoch}, step {step} (phase {phase})")]
    NonFiniteLoss { phase: u8, epoch: usize, step: usize },

    #[error("version mismatch: {0}")]
    VersionMismatch(String),

    #[error("corrupt record: {0}")]
    CorruptRecord(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dims(expected: impl Into<String>, found: impl Into<String>) -> Self {
        Error::DimensionMismatch {
            expected: expected.into(),
            found: found.into(),
        }
    }
}
