use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("time step {dt} is too coarse; the cavity filter needs dt <= {limit} (0.1/kappa)")]
    GridTooCoarse { dt: f64, limit: f64 },

    #[error("envelope grids do not match: {0}")]
    GridMismatch(String),

    #[error("{0}")]
    Undefined(String),

    #[error("singular generator: {0}")]
    SingularSystem(String),

    #[error("state invariant violated at t = {time}: {what}")]
    InvariantViolation { time: f64, what: String },

    #[error(
        "truncation breach at t = {time}: population {population:.3e} in the top Fock level \
         (n_max = {n_max}) exceeds {tolerance:.1e}; raise n_max"
    )]
    TruncationBreach {
        time: f64,
        population: f64,
        n_max: usize,
        tolerance: f64,
    },

    #[error("channel {0} is not present in this drive configuration")]
    ChannelNotPresent(String),

    #[error("correlations do not decay (kappa = gamma = 0); the spectrum is undefined")]
    NonDecaying,

    #[error("no checkpoint stored at grid index {0}")]
    MissingCheckpoint(usize),

    #[error("tau spacing {spacing} is not a positive integer multiple of dt = {dt}")]
    TauGrid { spacing: f64, dt: f64 },

    #[error("i/o failure: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn param(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field,
            reason: reason.into(),
        }
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
