use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tableau: {0}")]
    InvalidTableau(String),

    #[error("unknown builtin tableau `{0}`")]
    UnknownTableau(String),

    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("stage fixed-point iteration diverged after {iterations} sweeps (residual {residual:.3e}); step size is above the contraction threshold")]
    FixedPointDivergence { iterations: usize, residual: f64 },

    #[error("stage linear solve failed: {0}")]
    StageSolveFailure(String),

    #[error("step {step} failed: {source}")]
    StepFailed {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("replica {replica} failed: {source}")]
    ReplicaFailed {
        replica: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("coarsening factor {r} does not divide step count {n}")]
    BadCoarsening { r: usize, n: usize },

    #[error("diagnostic precondition violated: {0}")]
    DiagnosticPrecondition(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn at_step(self, step: usize) -> Error {
        Error::StepFailed {
            step,
            source: Box::new(self),
        }
    }

    pub fn in_replica(self, replica: usize) -> Error {
        Error::ReplicaFailed {
            replica,
            source: Box::new(self),
        }
    }
}
