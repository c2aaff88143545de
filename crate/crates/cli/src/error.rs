use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Unknown keys, bad values, unreadable config files.
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing input artifact {path}: run `{stage}` first")]
    MissingArtifact { stage: &'static str, path: PathBuf },

    #[error("runtime failure: {0}")]
    Runtime(#[from] sitscd::Error),

    #[error("runtime failure: {0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) => ExitCode::from(2),
            CliError::MissingArtifact { .. } => ExitCode::from(3),
            CliError::Runtime(_) | CliError::Other(_) => ExitCode::from(1),
        }
    }

    /// Short name of the error class, printed before the message.
    pub fn class(&self) -> &'static str {
        match self {
            CliError::Config(_) => "ConfigError",
            CliError::MissingArtifact { .. } => "MissingArtifact",
            CliError::Runtime(_) | CliError::Other(_) => "RuntimeError",
        }
    }
}
