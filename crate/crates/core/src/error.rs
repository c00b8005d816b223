use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("assembly error at node {node}: {reason}")]
    Assembly { node: usize, reason: String },

    #[error("{method} did not converge after {iterations} iterations (last relative residual {last:.3e})", last = residual_history.last().copied().unwrap_or(f64::NAN))]
    Solver {
        method: &'static str,
        iterations: usize,
        residual_history: Vec<f64>,
    },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("time step failed at t = {t}, dt = {dt}: I + dt*L is singular at node {node}")]
    Step { t: f64, dt: f64, node: usize },

    #[error("Picard coupling did not converge at t = {t} after {} iterations", history.len())]
    Picard { t: f64, history: Vec<f64> },

    #[error("non-local corrector unavailable: {0}")]
    NonLocal(String),

    #[error("eps = {eps} is under-resolved: {nodes_per_period:.2} nodes per period, need at least {required}")]
    UnderResolved {
        eps: f64,
        nodes_per_period: f64,
        required: usize,
    },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Strips any number of context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}
