use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("field does not conform to grid: {0}")]
    GridMismatch(String),

    #[error("nonpositive weight {value} at index {index}")]
    NonpositiveWeight { index: usize, value: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("invalid density profile: {0}")]
    InvalidProfile(String),

    #[error("{solver} did not converge in {iterations} iterations (relative residual {residual:e})")]
    NoConvergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("eigensolver stagnated after {iterations} iterations (last Ritz residual {residual:e})")]
    EigenStagnation { iterations: usize, residual: f64 },

    #[error("input field is not divergence free (relative divergence {0:e})")]
    NotDivergenceFree(f64),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("no positive ρ̄′ region found; profile has no unstable layer")]
    NoUnstableRegion,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("growth bracket failure: {0}")]
    Bracket(String),

    #[error("density bounds violated: {0}")]
    DensityBounds(String),

    #[error("malformed snapshot: {0}")]
    Snapshot(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
