use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("matrix is not positive definite (jitter ladder exhausted)")]
    NotPositiveDefinite,

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("loss node must be 1x1, got {0:?}")]
    NotScalar((usize, usize)),

    #[error("node {0} is not on the tape")]
    UnknownNode(usize),

    #[error("node {0} does not depend on any parameter")]
    UntrackedNode(usize),

    #[error("target at the sensor origin; bearing undefined")]
    TargetAtOrigin,

    #[error("covariance collapse at step {step}: {source}")]
    CovarianceCollapse {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite policy output at step {0}")]
    PolicyNonFinite(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wraps a numerical failure with the filter step it happened at.
    pub fn at_step(self, step: usize) -> Error {
        match self {
            e @ Error::CovarianceCollapse { .. } => e,
            e @ Error::PolicyNonFinite(_) => e,
            other => Error::CovarianceCollapse {
                step,
                source: Box::new(other),
            },
        }
    }
}
