use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing input: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    Missing(Vec<PathBuf>),

    #[error(transparent)]
    Core(#[from] dynmoe::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 2 configuration, 3 missing or unusable input, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        use dynmoe::Error as E;
        match self {
            CliError::Config(_) | CliError::Core(E::Config(_)) => 2,
            CliError::Missing(_) | CliError::Core(E::Input(_) | E::Format(_)) => 3,
            CliError::Core(E::Io(e)) | CliError::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 3,
            CliError::Core(E::NonFinite(_) | E::DegenerateSoftmax { .. }) => 4,
            _ => 1,
        }
    }
}
