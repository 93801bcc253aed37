use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("trajectories live on different grids")]
    GridMismatch,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite state at grid node {node}")]
    BlowUp { node: usize },

    #[error("invalid subsystem model: {0}")]
    InvalidModel(String),

    #[error("invalid coupling graph: {0}")]
    InvalidGraph(String),

    #[error("closed-loop matrix is not Hurwitz (largest real part {0})")]
    NotHurwitz(f64),

    #[error("Lyapunov equation is singular")]
    SingularLyapunov,

    #[error("agent {agent}: {source}")]
    Agent {
        agent: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors caused by the user's input rather than by the numerics.
    pub fn is_config_error(&self) -> bool {
        match self {
            Error::Config(_) | Error::Json(_) | Error::Parse(_) | Error::InvalidGraph(_) => true,
            Error::Agent { source, .. } => source.is_config_error(),
            _ => false,
        }
    }

    pub(crate) fn for_agent(self, agent: usize) -> Error {
        Error::Agent {
            agent,
            source: Box::new(self),
        }
    }
}
