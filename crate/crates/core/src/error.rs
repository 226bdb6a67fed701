use thiserror::Error;

/// Errors raised by the laboratory.
///
/// Variants fall into three groups that the command line maps onto exit
/// codes: invalid configuration (2), guard violations (3) and failed
/// checks (4). See [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("grid guard violated: {0}")]
    GridGuard(String),

    #[error("grid specifications do not match: {0}")]
    SpecMismatch(String),

    #[error("measure atom does not lie on the lattice: {0}")]
    AtomOffLattice(String),

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("scale guard violated: {0}")]
    ScaleGuard(String),

    #[error("measure must be flagged mean-zero")]
    NotMeanZero,

    #[error("measure must be positive")]
    NotPositive,

    #[error("region lies outside the domain: {0}")]
    OutOfDomain(String),

    #[error("dynamic range exceeds 2^64 slice cap")]
    DynamicRange,

    #[error("decay fit needs at least 4 dyadic annuli, found {0}")]
    TooFewAnnuli(usize),

    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    #[error("power iteration did not converge in {0} steps")]
    NoConvergence(usize),

    #[error("support precondition violated: {0}")]
    Support(String),

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code associated with this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::Json(_) | Error::Io(_) => 2,
            Error::CheckFailed(_) => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
