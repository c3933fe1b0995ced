use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("starvation overflow: {starved} starved users exceed the per-cell limit {limit}")]
    StarvationOverflow { starved: usize, limit: usize },

    #[error("location ({x:.3}, {y:.3}) is outside the map coverage")]
    OutOfCoverage { x: f64, y: f64 },

    #[error("user {0} was not scheduled in the previous epoch")]
    NotScheduled(usize),

    #[error("echo of user {0} carries no power from its own beam")]
    EchoLost(usize),

    #[error("ckm format error: {0}")]
    Format(String),

    #[error("io error")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Dimension { .. } => "dimension",
            Error::Config(_) => "config",
            Error::StarvationOverflow { .. } => "starvation_overflow",
            Error::OutOfCoverage { .. } => "out_of_coverage",
            Error::NotScheduled(_) => "not_scheduled",
            Error::EchoLost(_) => "echo_lost",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
        }
    }
}
