use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate schedule: gamma_T = {gamma_last:e} is not below 1e-3")]
    ScheduleDegenerate { gamma_last: f64 },

    #[error("level index {t} outside 1..={steps}")]
    IndexOutOfRange { t: usize, steps: usize },

    #[error("matrix is not symmetric positive definite")]
    NotPositiveDefinite,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("set of {n} observations exceeds the network capacity m_max = {m_max}")]
    CardinalityOverflow { n: usize, m_max: usize },

    #[error("sampler diverged at level t = {t} in chain {chain}")]
    SamplerDiverged { t: usize, chain: usize },

    #[error("ODE integration produced a non-finite state at step {step}")]
    IntegratorInstability { step: usize },

    #[error("simulation rejected: {0}")]
    SimulationRejected(String),

    #[error("random-walk Metropolis acceptance {acceptance:.4} is below 1%; adjust the step scale")]
    StepScale { acceptance: f64 },

    #[error("{n} observations exceed the exact-expansion limit of {max}")]
    TooManyObservations { n: usize, max: usize },

    #[error("median pairwise distance is zero; bandwidth is degenerate")]
    DegenerateBandwidth,

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
