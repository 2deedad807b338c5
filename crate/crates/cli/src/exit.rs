use std::fmt;
use std::process::ExitCode;

use histopair::agents::AgentError;
use histopair::cliptrain::TrainError;
use histopair::corpus::CorpusError;
use histopair::evaluation::EvalError;
use histopair::extraction::ExtractionError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage = 1,
    Input = 2,
    Backend = 3,
    Internal = 4,
}

/// An error tagged with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(kind: Kind, error: anyhow::Error) -> Self {
        Self { kind, error }
    }

    pub fn usage(e: impl Into<anyhow::Error>) -> Self {
        Self::new(Kind::Usage, e.into())
    }

    pub fn input(e: impl Into<anyhow::Error>) -> Self {
        Self::new(Kind::Input, e.into())
    }

    pub fn internal(e: impl Into<anyhow::Error>) -> Self {
        Self::new(Kind::Internal, e.into())
    }

    pub fn context(self, msg: impl fmt::Display + Send + Sync + 'static) -> Self {
        Self { kind: self.kind, error: self.error.context(msg) }
    }

    pub fn code(&self) -> ExitCode {
        ExitCode::from(self.kind as u8)
    }
}

impl From<AgentError> for Failure {
    fn from(e: AgentError) -> Self {
        let kind = match &e {
            AgentError::Backend { .. } | AgentError::EmptyResponse { .. } | AgentError::ShortList { .. } => Kind::Backend,
            AgentError::Malformed { .. } | AgentError::Script { .. } => Kind::Backend,
            AgentError::InvalidInput(_) => Kind::Internal,
        };
        Self::new(kind, e.into())
    }
}

impl From<ExtractionError> for Failure {
    fn from(e: ExtractionError) -> Self {
        match e {
            ExtractionError::Agent(a) => a.into(),
            ExtractionError::Config(_) => Self::usage(e),
            ExtractionError::Patches { .. } | ExtractionError::Dump { .. } | ExtractionError::Io(_) => Self::input(e),
            ExtractionError::Vector(_) => Self::input(e),
            ExtractionError::EmptyPrompts | ExtractionError::AlreadyDeduped(_) => Self::internal(e),
        }
    }
}

impl From<CorpusError> for Failure {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::IncompleteRecord { .. } => Self::internal(e),
            _ => Self::input(e),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Schedule(_) => Self::usage(e),
            TrainError::EmptySource { .. } | TrainError::Shape(_) | TrainError::Vector(_) | TrainError::Io(_) => {
                Self::input(e)
            }
            _ => Self::internal(e),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Backend(a) => a.into(),
            EvalError::NonFiniteGradient => Self::internal(e),
            EvalError::TooFewSeeds(_) => Self::usage(e),
            _ => Self::input(e),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::input(e)
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;
