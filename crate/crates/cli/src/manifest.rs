use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

/// Package version plus `git describe` of the build tree.
pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "-", env!("SKILLMERGE_GIT_DESCRIBE"));

/// Record of one command run, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub seed: u64,
    pub version: String,
    /// Seconds since the Unix epoch when the run started.
    pub started_at: u64,
    pub wall_clock_secs: f64,
}

/// Collects inputs and outputs while a command runs.
pub struct Run {
    command: String,
    config: Value,
    seed: u64,
    inputs: Vec<String>,
    outputs: Vec<String>,
    started_at: u64,
    clock: Instant,
}

impl Run {
    pub fn new(command: &str, config: Value, seed: u64) -> Self {
        let started_at = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        Self { command: command.into(), config, seed, inputs: Vec::new(), outputs: Vec::new(), started_at, clock: Instant::now() }
    }

    pub fn set_config(&mut self, config: Value) {
        self.config = config;
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn manifest(&self) -> RunManifest {
        RunManifest {
            command: self.command.clone(),
            config: self.config.clone(),
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
            seed: self.seed,
            version: VERSION.into(),
            started_at: self.started_at,
            wall_clock_secs: self.clock.elapsed().as_secs_f64(),
        }
    }

    /// Writes the manifest beside the first output, if there is one.
    pub fn finish(self) -> CliResult<Option<PathBuf>> {
        let Some(first) = self.outputs.first() else {
            return Ok(None);
        };
        let path = manifest_path(Path::new(first));
        let text = serde_json::to_string_pretty(&self.manifest())? + "\n";
        std::fs::write(&path, text).map_err(|e| CliError::io(path.display(), e))?;
        Ok(Some(path))
    }
}

/// `dir/manifest.json` for directory outputs, `file.manifest.json` otherwise.
pub fn manifest_path(output: &Path) -> PathBuf {
    if output.is_dir() {
        output.join("manifest.json")
    } else {
        let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        output.with_file_name(name)
    }
}
