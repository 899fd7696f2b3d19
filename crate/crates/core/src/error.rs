use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite vehicle state")]
    NonFiniteState,
    #[error("simulation produced a non-finite value at record {index}")]
    NonFiniteSimulation { index: usize },
    #[error("time step {0} outside (0, 0.1] s")]
    InvalidTimeStep(f64),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("excitation channel mask is empty")]
    EmptyChannelMask,
    #[error("insufficient samples: {got} records, need at least {need}")]
    InsufficientSamples { got: usize, need: usize },
    #[error("singular normal equations; near-null parameter columns: {columns:?}")]
    SingularNormalEquations { columns: Vec<&'static str> },
    #[error("candidate model diverged during every trial step")]
    DivergedSimulation,
    #[error("innovation covariance is numerically singular (condition {condition:e})")]
    SingularInnovation { condition: f64 },
    #[error("infeasible trajectory: {0}")]
    InfeasibleTrajectory(String),
    #[error("tracking diverged at t = {t:.2} s: cross-track error {error:.3} m exceeds {bound:.3} m")]
    TrackingDiverged { t: f64, error: f64, bound: f64 },
    #[error("record {index}: {source}")]
    AtRecord {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at(self, index: usize) -> Error {
        Error::AtRecord {
            index,
            source: Box::new(self),
        }
    }
}
