use al_core::rounds::LoopError;

pub const EXIT_INVARIANT: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_OTHER: i32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Loop(#[from] LoopError),
    #[error(transparent)]
    Pipeline(#[from] al_core::pipeline::PipelineError),
    #[error(transparent)]
    Service(#[from] al_service::ServiceError),
    #[error("{path}: {message}")]
    Config { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Loop(e) if e.is_invariant() => EXIT_INVARIANT,
            CliError::Pipeline(e) if e.is_invariant() => EXIT_INVARIANT,
            CliError::Loop(e) if e.is_io() || is_store_setup(e) => EXIT_IO,
            CliError::Pipeline(al_core::pipeline::PipelineError::Loop(e))
                if e.is_io() || is_store_setup(e) =>
            {
                EXIT_IO
            }
            CliError::Service(_) | CliError::Config { .. } | CliError::Io { .. } => EXIT_IO,
            _ => EXIT_OTHER,
        }
    }

    pub fn config(path: &std::path::Path, message: impl ToString) -> Self {
        CliError::Config {
            path: path.display().to_string(),
            message: message.to_string(),
        }
    }

    pub fn io(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

fn is_store_setup(e: &LoopError) -> bool {
    matches!(e, LoopError::NotInitialized | LoopError::AlreadyInitialized)
}

macro_rules! from_config_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Config { path: "<input>".into(), message: e.to_string() }
            }
        }
    )*};
}

from_config_error!(
    al_core::corpus::CorpusError,
    al_core::synth::SynthError,
    al_core::jsonl::JsonlError,
    al_core::embed::EmbedError
);
