use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] cqs_core::Error),

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    /// A config file field failed to parse or is not recognized.
    #[error("config field `{field}`: {msg}")]
    ConfigField { field: String, msg: String },

    #[error("{0}")]
    Usage(String),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::MissingFile(_) => "missing_file",
            CliError::ConfigField { .. } => "config_field",
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// `error: kind=<kind> msg="<message>"` on a single line.
    pub fn line(&self) -> String {
        let msg = self
            .to_string()
            .replace('\\', "\\\\")
            .replace('"', "\\\"")
            .replace('\n', "\\n");
        format!("error: kind={} msg=\"{msg}\"", self.kind())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
