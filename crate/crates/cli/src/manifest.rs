use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{CliError, Result};

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

/// Record of one command invocation, written before any other output.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    pub version: String,
}

impl RunManifest {
    pub fn new(
        command: &str,
        config_path: Option<&Path>,
        seed: Option<u64>,
        output_dir: &Path,
    ) -> Self {
        RunManifest {
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            seed,
            output_dir: output_dir.to_path_buf(),
            version: VERSION.to_string(),
        }
    }

    /// Creates the output directory and writes `run_manifest.json` into it.
    pub fn write(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.output_dir).map_err(|e| CliError::io(&self.output_dir, e))?;
        let path = self.output_dir.join("run_manifest.json");
        let body = serde_json::to_string_pretty(self).map_err(cqs_core::Error::from)?;
        fs::write(&path, body + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
