use thiserror::Error;

/// Errors produced by the estimation library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not Hurwitz (max eigenvalue real part {max_real_part:e})")]
    NotHurwitz { max_real_part: f64 },

    #[error("matrix is numerically singular: {0}")]
    Singular(String),

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("steady-state integration did not converge within t = {horizon} (residual {residual:e})")]
    NoConvergence {
        horizon: f64,
        residual: f64,
        /// Row-major flags for entries that were still moving at the horizon.
        divergent: Vec<bool>,
        /// Row-major last iterate.
        last_value: Vec<f64>,
    },

    #[error("steady-state solution is not stabilizing (closed-loop max real part {max_real_part:e})")]
    NotStabilizing { max_real_part: f64 },

    #[error("invalid efficiencies: eta_o = {eta_o}, eta_u = {eta_u}")]
    InvalidEfficiency { eta_o: f64, eta_u: f64 },

    #[error("invalid system: {0}")]
    InvalidSystem(String),

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("non-finite value encountered in {0}")]
    NonFiniteValue(String),

    #[error("haloed and direct filter disagree: covariance {cov_deviation:e}, mean {mean_deviation:e}")]
    IdentityViolation { cov_deviation: f64, mean_deviation: f64 },

    #[error("covariance is singular or not positive definite")]
    SingularCovariance,

    #[error("haloed variance combination is singular at step {0}")]
    SingularHaloedVariance(usize),

    #[error("smoothing combination is singular at step {0}")]
    SingularCombination(usize),

    #[error("homodyne phase too close to +-pi/2 (|cos theta_o| = {0:e})")]
    DegeneratePhase(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// True for failures of the numerics (as opposed to bad inputs).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotHurwitz { .. }
                | Error::Singular(_)
                | Error::NoConvergence { .. }
                | Error::NotStabilizing { .. }
                | Error::NonFiniteValue(_)
                | Error::IdentityViolation { .. }
                | Error::SingularCovariance
                | Error::SingularHaloedVariance(_)
                | Error::SingularCombination(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
