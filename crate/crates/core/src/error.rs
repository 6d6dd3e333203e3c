use thiserror::Error;

/// Errors raised by the dynamics, Jacobi, bundle and rigidity routines.
///
/// Indices are absolute time indices `n` of the map sequence unless stated
/// otherwise.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{op}: Newton solve did not converge at n={index} (last residual {residual:.3e})")]
    NoConvergence {
        op: &'static str,
        index: i64,
        residual: f64,
    },

    #[error("configuration is not extremal at n={index} (residual {residual:.3e} > {tolerance:.1e})")]
    NotExtremal {
        index: i64,
        residual: f64,
        tolerance: f64,
    },

    #[error("twist condition violated at n={index}: smallest singular value of b_n is {sigma_min:.3e}, expected at least {bound:.3e}")]
    TwistViolation {
        index: i64,
        sigma_min: f64,
        bound: f64,
    },

    #[error("Riccati sequence from base k={base} lost positivity at n={index} (min eigenvalue {min_eigenvalue:.3e})")]
    PositivityLost {
        base: i64,
        index: i64,
        min_eigenvalue: f64,
    },

    #[error("Riccati sequence from base k={base} is not monotone in k at n={index} (min eigenvalue of increment {min_eigenvalue:.3e})")]
    MonotonicityViolation {
        base: i64,
        index: i64,
        min_eigenvalue: f64,
    },

    #[error("backward limit did not converge within horizon {horizon} (last Cauchy gap {gap:.3e})")]
    LimitNotConverged { horizon: usize, gap: f64 },

    #[error("Jacobi matrix xi_n is singular at n={index} (sigma_min {sigma_min:.3e})")]
    SingularXi { index: i64, sigma_min: f64 },

    #[error("eigenvalue recursion reached a non-positive value {value} at step {step}")]
    NonPositive { step: usize, value: f64 },

    #[error("pushed-forward plane is vertical-degenerate at n={index} (sigma_min of X {sigma_min:.3e})")]
    VerticalCollision { index: i64, sigma_min: f64 },

    #[error("quadrature coverage gap: {excluded} of {total} nodes excluded (bound {bound})")]
    CoverageGap {
        excluded: usize,
        total: usize,
        bound: f64,
    },

    #[error("requested horizon {requested} exceeds the maximum {max}")]
    HorizonExceeded { requested: usize, max: usize },

    #[error("index n={index} lies outside the available range {first}..={last}")]
    OutOfRange { index: i64, first: i64, last: i64 },

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("configuration has {} schema error(s):\n  {}", .0.len(), .0.join("\n  "))]
    Schema(Vec<String>),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io: {0}")]
    Io(String),
}

impl Error {
    /// Wraps the error with a `module::operation` / node description.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Strips `Context` wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
