//! Top-level error with a coarse class that maps onto process exit codes.

use crate::gridnav::EnvError;
use crate::matching::MatchError;
use crate::metrics::MetricsError;
use crate::ndgrad::checkpoint::CheckpointError;
use crate::ndgrad::GradError;
use crate::net::NetError;
use crate::ppo::PpoError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration or arguments.
    #[error("config error: {0}")]
    Config(String),
    /// Missing, malformed or inconsistent files and data.
    #[error("data error: {0}")]
    Data(String),
    /// NaN or infinity during training or evaluation.
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Numeric(_) => 4,
        }
    }

    /// Prefixes the message with `context`, keeping the class.
    pub fn context(self, context: impl std::fmt::Display) -> Self {
        match self {
            Self::Config(m) => Self::Config(format!("{context}: {m}")),
            Self::Data(m) => Self::Data(format!("{context}: {m}")),
            Self::Numeric(m) => Self::Numeric(format!("{context}: {m}")),
        }
    }
}

impl From<EnvError> for Error {
    fn from(e: EnvError) -> Self {
        match e {
            EnvError::Argument(_) => Self::Config(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<GradError> for Error {
    fn from(e: GradError) -> Self {
        match e {
            GradError::NonFinite(_) => Self::Numeric(e.to_string()),
            GradError::Config(_) => Self::Config(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<NetError> for Error {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Config(_) => Self::Config(e.to_string()),
            NetError::Grad(g) => g.into(),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<MatchError> for Error {
    fn from(e: MatchError) -> Self {
        match e {
            MatchError::Numeric(_) => Self::Numeric(e.to_string()),
            MatchError::Grad(g) => g.into(),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<PpoError> for Error {
    fn from(e: PpoError) -> Self {
        match e {
            PpoError::Config(_) => Self::Config(e.to_string()),
            PpoError::NonFinite(_) => Self::Numeric(e.to_string()),
            PpoError::Env { episode, source } => Error::from(source).context(format!("episode {episode}")),
            PpoError::Net(n) => n.into(),
            PpoError::Match(m) => m.into(),
            PpoError::Grad(g) => g.into(),
        }
    }
}

impl From<MetricsError> for Error {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Argument(_) => Self::Config(e.to_string()),
            MetricsError::Env { episode, source } => Error::from(source).context(format!("episode {episode}")),
            MetricsError::Net(n) => n.into(),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for Error {
    fn from(e: CheckpointError) -> Self {
        Self::Data(e.to_string())
    }
}
