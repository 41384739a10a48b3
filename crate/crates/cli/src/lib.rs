//! Library side of the `jcpulse` command: configuration parsing and run execution.

pub mod config;
pub mod error;
pub mod execute;

pub use config::{parse_config, parse_str, Artifact, RunSpec, SCHEMA_VERSION};
pub use error::{exit, CliError};
pub use execute::{execute, Mode, Outcome};

/// Environment variable naming the directory that run outputs are written under.
pub const OUTPUT_ROOT_VAR: &str = "JCPULSE_OUTPUT_ROOT";
