use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("eigensolver did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },

    #[error("training diverged at iteration {iteration} (loss = {loss})")]
    Divergence {
        iteration: usize,
        loss: f64,
        history: Vec<f64>,
    },

    #[error("simulation of example {index} failed: {source}")]
    Example {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("amplitude reconstruction failed (residual {residual:e})")]
    Reconstruction { residual: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
