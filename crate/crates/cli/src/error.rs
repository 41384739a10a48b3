use std::path::{Path, PathBuf};

use thiserror::Error;

/// Process exit codes.
pub mod exit {
    pub const PASS: u8 = 0;
    pub const VERIFICATION_FAILED: u8 = 1;
    pub const INVALID_INPUT: u8 = 2;
    pub const NUMERICAL_FAILURE: u8 = 3;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}", config_message(file, key, message))]
    Config {
        file: PathBuf,
        key: String,
        message: String,
    },

    #[error("{context}: {error}{}", hint(error))]
    Core {
        context: String,
        error: jcpulse_core::Error,
    },

    #[error("cannot write {}: {message}", path.display())]
    Output { path: PathBuf, message: String },
}

fn config_message(file: &Path, key: &str, message: &str) -> String {
    let mut out = String::new();
    if !file.as_os_str().is_empty() {
        out.push_str(&format!("{}: ", file.display()));
    }
    if !key.is_empty() {
        out.push_str(&format!("`{key}`: "));
    }
    out.push_str(message);
    out
}

fn hint(e: &jcpulse_core::Error) -> String {
    match e {
        jcpulse_core::Error::TruncationBreach { n_max, .. } => format!(
            "\n  hint: set `space.n_max` above {n_max}, or weaken the pulse; `jcpulse sweep` shows how results move with n_max"
        ),
        jcpulse_core::Error::InvariantViolation { .. } => "\n  hint: reduce `grid.dt`".into(),
        _ => String::new(),
    }
}

impl CliError {
    pub fn config(file: impl AsRef<Path>, key: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Config {
            file: file.as_ref().to_path_buf(),
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn core(context: impl Into<String>, error: jcpulse_core::Error) -> Self {
        Self::Core {
            context: context.into(),
            error,
        }
    }

    pub fn output(path: &Path, message: impl ToString) -> Self {
        Self::Output {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }

    /// Attaches the config file to a configuration error.
    pub fn with_file(self, path: &Path) -> Self {
        match self {
            Self::Config { key, message, .. } => Self::Config {
                file: path.to_path_buf(),
                key,
                message,
            },
            other => other,
        }
    }

    pub fn exit_code(&self) -> u8 {
        use jcpulse_core::Error as E;
        match self {
            Self::Config { .. } | Self::Output { .. } => exit::INVALID_INPUT,
            Self::Core { error, .. } => match error {
                E::SingularSystem(_)
                | E::InvariantViolation { .. }
                | E::TruncationBreach { .. }
                | E::NonDecaying
                | E::MissingCheckpoint(_) => exit::NUMERICAL_FAILURE,
                _ => exit::INVALID_INPUT,
            },
        }
    }
}
