use num_complex::Complex64;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("singular pencil: sE - A is singular at probes s = {probes:?} (first zero pivot in row {row})")]
    SingularPencil { probes: Vec<f64>, row: usize },

    #[error("shifted matrix sE - A numerically singular at s = {s} (rcond {rcond:e})")]
    SingularShift { s: Complex64, rcond: f64 },

    #[error("empty frequency grid")]
    EmptyFrequencyGrid,

    #[error("frequency grid must be positive and strictly increasing (violated at index {index})")]
    InvalidFrequencyGrid { index: usize },

    #[error("transfer evaluation failed at omega = {omega}: {source}")]
    AtFrequency {
        omega: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("pipe length {length} is not an integral multiple of mesh size {mesh}")]
    MeshNotIntegral { length: f64, mesh: f64 },

    #[error("mesh too coarse for FVM stencil: {cells} unknowns per field, need at least 2")]
    MeshTooCoarse { cells: usize },

    #[error("nonphysical pressure {value} at index {index}")]
    NonphysicalPressure { index: usize, value: f64 },

    #[error("topology error: {0}")]
    Topology(String),

    #[error("step matrix E - tau*A is singular for tau = {tau}")]
    SingularStepMatrix { tau: f64 },

    #[error("divergence at step {step}: state component {index} is not finite")]
    Divergence { step: usize, index: usize },

    #[error("higher-index DAE; polynomial part not constant")]
    HigherIndex,

    #[error("polynomial part cross-check failed: |H(i*1e8) - D| = {deviation:e}")]
    PolynomialCrossCheck { deviation: f64 },

    #[error("rank deficient basis: columns {indices:?} are (nearly) collinear with earlier columns")]
    RankDeficient { indices: Vec<usize> },

    #[error("eigenvalue computation failed: {0}")]
    Eigen(String),

    #[error("invalid reduction configuration: {0}")]
    InvalidReduction(String),

    #[error("nonlinearity evaluation failed: {0}")]
    Nonlinearity(String),
}

impl Error {
    pub(crate) fn dims(what: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::DimensionMismatch {
            what,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
