use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("box `{which}` excludes the origin at coordinate {index} ([{lower}, {upper}])")]
    BoxExcludesOrigin {
        which: String,
        index: usize,
        lower: f64,
        upper: f64,
    },

    #[error("invalid box `{which}` at coordinate {index}: {reason}")]
    InvalidBox {
        which: String,
        index: usize,
        reason: String,
    },

    #[error("matrix `{which}` is not symmetric positive definite (min eigenvalue {min_eig:e})")]
    NotPositiveDefinite { which: String, min_eig: f64 },

    #[error("no certificate found within {budget} iterations (best max eigenvalue {best_max_eig:e})")]
    CertificateNotFound { budget: usize, best_max_eig: f64 },

    #[error("window length mismatch: {what} has length {found}, expected {expected}")]
    WindowLengthMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("degenerate Hessian: minimum eigenvalue {min_eig:e} is not positive")]
    DegenerateHessian { min_eig: f64 },

    #[error("non-finite iterate at iteration {iteration}")]
    NonfiniteIterate { iteration: usize },

    #[error("active-set method exceeded {cycles} cycles (KKT residual {residual:e})")]
    MaxCyclesExceeded { cycles: usize, residual: f64 },

    #[error("closed-loop trajectory diverged (norm {norm:e} at step {step})")]
    DivergentTrajectory { step: usize, norm: f64 },

    #[error("stability assumption violated: {reason}")]
    StabilityAssumptionViolated { reason: String },

    #[error("rho = {rho} >= 1 for M = {horizon}; the smallest horizon with rho < 1 is M = {min_horizon}")]
    ContractionViolated {
        rho: f64,
        horizon: usize,
        min_horizon: usize,
    },

    #[error("no iteration count up to {k_max} satisfies the small-gain conditions (best K = {best_k}, worst margin {best_margin:e})")]
    NotFoundBelowCap {
        k_max: usize,
        best_k: usize,
        best_margin: f64,
    },

    #[error("small-gain conditions fail at K = {k} (worst margin {margin:e})")]
    SmallGainViolated { k: usize, margin: f64 },

    #[error("sampling box `{which}` is unbounded at coordinate {index}")]
    UnboundedSampleBox { which: String, index: usize },

    #[error("degenerate denominator in Lipschitz ratio")]
    DegenerateDenominator,

    #[error("monitor violation at step {step}: {monitor}")]
    MonitorViolation { step: usize, monitor: String },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("parse error at `{path}`: {message}")]
    Parse { path: String, message: String },

    #[error("validation error at `{path}`: {reason}")]
    Validation { path: String, reason: String },

    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn name(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::BoxExcludesOrigin { .. } => "BoxExcludesOrigin",
            Error::InvalidBox { .. } => "InvalidBox",
            Error::NotPositiveDefinite { .. } => "NotPositiveDefinite",
            Error::CertificateNotFound { .. } => "NotFound",
            Error::WindowLengthMismatch { .. } => "WindowLengthMismatch",
            Error::DegenerateHessian { .. } => "DegenerateHessian",
            Error::NonfiniteIterate { .. } => "NonfiniteIterate",
            Error::MaxCyclesExceeded { .. } => "MaxCyclesExceeded",
            Error::DivergentTrajectory { .. } => "DivergentTrajectory",
            Error::StabilityAssumptionViolated { .. } => "StabilityAssumptionViolated",
            Error::ContractionViolated { .. } => "ContractionViolated",
            Error::NotFoundBelowCap { .. } => "NotFoundBelowCap",
            Error::SmallGainViolated { .. } => "SmallGainViolated",
            Error::UnboundedSampleBox { .. } => "UnboundedSampleBox",
            Error::DegenerateDenominator => "DegenerateDenominator",
            Error::MonitorViolation { .. } => "MonitorViolation",
            Error::InvalidParameter { .. } => "InvalidParameter",
            Error::Parse { .. } => "ParseError",
            Error::Validation { .. } => "ValidationError",
            Error::Io { .. } => "IoError",
        }
    }

    pub(crate) fn dims(what: impl Into<String>, expected: impl ToString, found: impl ToString) -> Self {
        Error::DimensionMismatch {
            what: what.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
