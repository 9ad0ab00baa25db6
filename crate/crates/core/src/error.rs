use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("backward seed node {node} is not a scalar (shape {shape:?})")]
    NonScalarSeed { node: usize, shape: Vec<usize> },

    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    /// The Gram matrix of first-integral gradients could not be factorised.
    #[error("singular projection: Gram matrix not positive definite (condition estimate {condition:.3e})")]
    SingularProjection { condition: f64 },

    #[error("nonlinear solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("first integral {index} drifted by {drift:.3e} in one implicit step (allowed {allowed:.3e})")]
    InvariantViolation { index: usize, drift: f64, allowed: f64 },

    #[error("step size underflow at t = {t}: dt = {dt:.3e} below minimum")]
    StepUnderflow { t: f64, dt: f64 },

    #[error("non-finite state at t = {t}")]
    NonFiniteState { t: f64 },

    #[error("two-body singularity: bodies closer than {distance:.3e}")]
    Collision { distance: f64 },

    #[error("non-finite training loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("training aborted at iteration {iteration}: {source}")]
    TrainingAborted {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(node: usize, op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            node,
            op,
            detail: detail.into(),
        }
    }

    /// True for failures that come from the projection being ill-posed.
    pub fn is_singular_projection(&self) -> bool {
        match self {
            Error::SingularProjection { .. } => true,
            Error::TrainingAborted { source, .. } => source.is_singular_projection(),
            _ => false,
        }
    }
}
