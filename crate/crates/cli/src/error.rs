use skillmerge_core::Error as CoreError;

/// Process exit codes. Usage errors come from clap, which exits with 2.
pub mod exit {
    pub const USAGE: i32 = 2;
    pub const FORMAT: i32 = 3;
    pub const CONTRACT: i32 = 4;
    pub const DIVERGENCE: i32 = 5;
    pub const IO: i32 = 6;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn io(path: impl std::fmt::Display, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_string(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Io { .. } => exit::IO,
            CliError::Core(e) => match e {
                CoreError::Format(_) | CoreError::Json(_) => exit::FORMAT,
                CoreError::Divergence(_) | CoreError::NonFinite(_) => exit::DIVERGENCE,
                CoreError::Io(_) => exit::IO,
                CoreError::Shape { .. }
                | CoreError::Contract(_)
                | CoreError::DegenerateBatch
                | CoreError::InvalidDensity(_)
                | CoreError::Merge(_) => exit::CONTRACT,
            },
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(CoreError::Json(e))
    }
}

pub type CliResult<T> = Result<T, CliError>;
