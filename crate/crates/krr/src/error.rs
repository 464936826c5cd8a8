use std::path::PathBuf;

use krr_core::Error as CoreError;

/// Process exit status for configuration, input and usage errors.
pub const EXIT_CONFIG: i32 = 2;
/// Process exit status for numerical failures.
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: u64, msg: String },

    #[error("{0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] CoreError),

    /// A replayed run produced different bytes than the manifest recorded.
    #[error("replay mismatch: {0}")]
    Mismatch(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if is_numeric(e) => EXIT_NUMERIC,
            CliError::Mismatch(_) => EXIT_NUMERIC,
            _ => EXIT_CONFIG,
        }
    }
}

fn is_numeric(e: &CoreError) -> bool {
    match e {
        CoreError::DegenerateData(_) | CoreError::DiagnosticUnavailable(_) => true,
        CoreError::Replicate { source, .. } => is_numeric(source),
        other => other.is_numeric(),
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
