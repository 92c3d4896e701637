use thiserror::Error;

/// Errors produced by grid construction, model evaluation and fitting.
#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid input: {0}")]
    Validation(String),

    #[error(
        "grid too coarse: cut points {first} and {second} snap to the same bin edge \
         (increase the bin count)"
    )]
    GridTooCoarse { first: f64, second: f64 },

    #[error("class {class} carries no probability mass (gamma < {floor:e})")]
    EmptyClass { class: usize, floor: f64 },

    #[error("inconsistent moments in class {class}: {detail}")]
    InconsistentMoments { class: usize, detail: String },

    #[error("numerical degeneracy: class {class} has {freq} observations but probability {gamma:e}")]
    NumericalDegeneracy { class: usize, freq: u64, gamma: f64 },

    #[error("moment covariance for class {class} could not be inverted after jitter")]
    CovarianceInversion { class: usize },

    #[error("optimizer failure: {message}")]
    OptimizerFailure { message: String, trace: Vec<f64> },

    #[error("sample {value} lies outside the tabulation support ({lower}, {upper}]")]
    SampleOutsideSupport { value: f64, lower: f64, upper: f64 },
}

impl Error {
    /// Stable machine-readable code, one per variant (used by the CLI).
    pub fn code(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::GridTooCoarse { .. } => "grid_too_coarse",
            Error::EmptyClass { .. } => "empty_class",
            Error::InconsistentMoments { .. } => "inconsistent_moments",
            Error::NumericalDegeneracy { .. } => "numerical_degeneracy",
            Error::CovarianceInversion { .. } => "covariance_inversion",
            Error::OptimizerFailure { .. } => "optimizer_failure",
            Error::SampleOutsideSupport { .. } => "sample_outside_support",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}
