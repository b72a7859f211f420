use thiserror::Error;

/// Errors raised by the conformal toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("calibration set is empty")]
    EmptyCalibration,

    #[error("sigma[{corner}] = {value} is not > 0")]
    NonPositiveSigma { corner: usize, value: f64 },

    #[error("{name} = {value} is outside {range}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        range: &'static str,
    },

    #[error("class {class} has no calibration records")]
    MissingClass { class: usize },

    #[error("class {class} is not in [0, {n_classes})")]
    InvalidClass { class: usize, n_classes: usize },

    #[error("isotonic fit received no usable points")]
    EmptyFit,

    #[error("invalid isotonic input: {0}")]
    InvalidFitInput(String),

    #[error("degenerate box: {dimension} = {value} px is not > 1e-6")]
    DegenerateBox { dimension: &'static str, value: f64 },

    #[error("per-class rows and class counts have different keys")]
    MismatchedKeys,

    #[error("paired samples have different lengths ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },

    #[error("paired t-test needs at least 2 pairs, got {0}")]
    TooFewPairs(usize),

    #[error("stratified split impossible: class {class} has no records")]
    StratificationImpossible { class: usize },

    #[error("two-step pipeline requires non-empty prediction sets (allow_empty must be false)")]
    EmptySetConfig,

    #[error("reports were produced from different split seeds")]
    SeedMismatch,

    #[error("invalid oracle spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: {rule}")]
    Validation { line: usize, rule: String },

    #[error("input file contains no records")]
    EmptyFile,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by inputs: data, configuration, unreadable or
    /// unwritable files. Only serialization failures count as internal.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Json(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
