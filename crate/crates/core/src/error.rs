use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid utility: {0}")]
    InvalidUtility(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("merton solver: {0}")]
    Merton(String),

    #[error("finite-difference Newton iteration stalled after {iterations} iterations at t = {t}")]
    NewtonStalled { iterations: usize, t: f64 },

    #[error("concavity lost on the finite-difference grid at t = {t}, x = {x}")]
    ConcavityLost { t: f64, x: f64 },

    #[error("correlation matrix is not positive definite (determinant {determinant})")]
    Correlation { determinant: f64 },

    #[error("invalid market model: {0}")]
    Model(String),

    #[error("quadrature produced a non-finite value at node {node}")]
    Quadrature { node: f64 },

    #[error("Poisson source is not centered: residual mass {residual}")]
    Centering { residual: f64 },

    #[error("invalid simulation config: {0}")]
    SimConfig(String),

    #[error("{count} path(s) produced a non-finite state (first: path {first})")]
    PathFailure { count: usize, first: usize },

    #[error("strategy precondition: {0}")]
    Strategy(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
