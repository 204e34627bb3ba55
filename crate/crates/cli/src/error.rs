//! Exit-code classification for stage failures.

use std::fmt;
use std::io;

use perfforge_core::corpus::CorpusError;
use perfforge_core::evalbench::EvalError;
use perfforge_core::jsonl::JsonlError;
use perfforge_core::orchestrate::prompts::PromptError;
use perfforge_core::orchestrate::{ClientError, OrchestrateError};
use perfforge_core::rlmath::RlError;
use perfforge_core::sampling::SamplingError;
use perfforge_core::serialize::PackError;
use perfforge_core::strategy::StrategyError;
use perfforge_core::template::TemplateError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 1,
    Input = 2,
    Environment = 3,
    Remote = 4,
}

pub struct StageError {
    pub kind: ExitKind,
    pub error: anyhow::Error,
}

impl StageError {
    pub fn new(kind: ExitKind, error: impl Into<anyhow::Error>) -> Self {
        Self {
            kind,
            error: error.into(),
        }
    }

    pub fn usage(msg: impl fmt::Display) -> Self {
        Self::new(ExitKind::Usage, anyhow::anyhow!("{msg}"))
    }

    pub fn input(msg: impl fmt::Display) -> Self {
        Self::new(ExitKind::Input, anyhow::anyhow!("{msg}"))
    }

    pub fn context(mut self, ctx: impl fmt::Display + Send + Sync + 'static) -> Self {
        self.error = self.error.context(ctx);
        self
    }
}

impl fmt::Debug for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {:#}", self.kind, self.error)
    }
}

pub type StageResult<T> = Result<T, StageError>;

macro_rules! classify {
    ($ty:ty, |$e:ident| $kind:expr) => {
        impl From<$ty> for StageError {
            fn from($e: $ty) -> Self {
                let kind = $kind;
                StageError::new(kind, $e)
            }
        }
    };
}

classify!(JsonlError, |e| match &e {
    JsonlError::Io { source, .. } if source.kind() == io::ErrorKind::NotFound => ExitKind::Input,
    JsonlError::Io { .. } => ExitKind::Environment,
    JsonlError::Parse { .. } => ExitKind::Input,
    JsonlError::Serialize(_) => ExitKind::Environment,
});

classify!(CorpusError, |e| match &e {
    CorpusError::InvalidFactor(_) => ExitKind::Usage,
    _ => ExitKind::Input,
});

classify!(EvalError, |e| match &e {
    EvalError::Config(_) => ExitKind::Usage,
    EvalError::CompilerMissing(_) | EvalError::Environment { .. } => ExitKind::Environment,
    _ => ExitKind::Input,
});

classify!(ClientError, |e| match &e {
    ClientError::Config(_) => ExitKind::Usage,
    ClientError::Journal(_) => ExitKind::Environment,
    _ => ExitKind::Remote,
});

classify!(StrategyError, |e| match &e {
    StrategyError::Client(ClientError::Config(_)) | StrategyError::Template(_) => ExitKind::Usage,
    StrategyError::Client(ClientError::Journal(_)) => ExitKind::Environment,
    StrategyError::Client(_) => ExitKind::Remote,
    StrategyError::Taxonomy(_) => ExitKind::Input,
    _ => ExitKind::Remote,
});

classify!(OrchestrateError, |e| match &e {
    OrchestrateError::Client(ClientError::Config(_)) | OrchestrateError::Template(_) => ExitKind::Usage,
    OrchestrateError::Client(ClientError::Journal(_)) => ExitKind::Environment,
    OrchestrateError::Client(_)
    | OrchestrateError::IncompleteGroup { .. }
    | OrchestrateError::EmptyPlan { .. }
    | OrchestrateError::MalformedPlan { .. } => ExitKind::Remote,
    OrchestrateError::Eval(EvalError::Config(_)) | OrchestrateError::Rl(RlError::Config(_)) => ExitKind::Usage,
    OrchestrateError::Eval(EvalError::CompilerMissing(_) | EvalError::Environment { .. }) => ExitKind::Environment,
    OrchestrateError::Worker(_) => ExitKind::Environment,
    _ => ExitKind::Input,
});

classify!(RlError, |e| match &e {
    RlError::Config(_) | RlError::GroupTooSmall(_) => ExitKind::Usage,
    _ => ExitKind::Input,
});

classify!(SamplingError, |e| match &e {
    SamplingError::InvalidBudget => ExitKind::Usage,
    _ => ExitKind::Input,
});

classify!(PackError, |_e| ExitKind::Input);
classify!(PromptError, |e| match &e {
    PromptError::Io { .. } => ExitKind::Input,
    _ => ExitKind::Usage,
});
classify!(TemplateError, |_e| ExitKind::Usage);
classify!(csv::Error, |_e| ExitKind::Environment);
classify!(io::Error, |e| match e.kind() {
    io::ErrorKind::NotFound => ExitKind::Input,
    _ => ExitKind::Environment,
});
