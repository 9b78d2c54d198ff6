use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),
    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(String),
    #[error("invalid vector: {0}")]
    InvalidVector(String),
    #[error("invalid regularizer: {0} (must be > 0)")]
    InvalidRegularizer(f64),
    #[error("invalid confidence level {0}: must lie in (0, 1)")]
    InvalidConfidence(f64),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("empty arm set")]
    NoArms,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("transport error: {0}")]
    Transport(#[from] std::io::Error),
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("round {round}, agent {agent}: {source}")]
    Trial {
        round: u64,
        agent: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn at(self, round: u64, agent: usize) -> Self {
        Error::Trial {
            round,
            agent,
            source: Box::new(self),
        }
    }
}
