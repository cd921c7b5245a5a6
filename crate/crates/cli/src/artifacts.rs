//! Run directories, atomic file output and the run manifest.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `bytes` to a temporary file next to `path`, then renames it into
/// place. Parent directories are created as needed.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

/// Creates `dir`, refusing a non-empty existing directory unless `force`.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        let mut entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(CliError::NotEmpty(dir.to_path_buf()));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn timestamp(t: SystemTime) -> String {
    DateTime::<Utc>::from(t).to_rfc3339_opts(SecondsFormat::Millis, true)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Versions {
    pub taxifed: String,
    pub taxifed_cli: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub versions: Versions,
    pub started_at: String,
    pub finished_at: String,
    /// Paths relative to the run directory, in emission order.
    pub files: Vec<String>,
}

/// Tracks the files a command emits into its run directory and writes the
/// manifest once at the end.
#[derive(Debug)]
pub struct Run {
    pub dir: PathBuf,
    command: String,
    config_hash: String,
    seed: u64,
    started: SystemTime,
    files: Vec<String>,
}

impl Run {
    pub fn start(dir: &Path, force: bool, command: &str, cfg: &ExperimentConfig) -> Result<Self, CliError> {
        prepare_out_dir(dir, force)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            config_hash: cfg.hash(),
            seed: cfg.master_seed,
            started: SystemTime::now(),
            files: Vec::new(),
        })
    }

    /// Atomically writes a file given relative to the run directory.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.dir.join(rel);
        write_atomic(&path, bytes)?;
        self.record(rel);
        Ok(path)
    }

    /// Records a file produced by other means.
    pub fn record(&mut self, rel: &str) {
        if !self.files.iter().any(|f| f == rel) {
            self.files.push(rel.to_string());
        }
    }

    pub fn finish(self) -> Result<Manifest, CliError> {
        let manifest = Manifest {
            command: self.command,
            config_hash: self.config_hash,
            seed: self.seed,
            versions: Versions {
                taxifed: taxifed::VERSION.to_string(),
                taxifed_cli: env!("CARGO_PKG_VERSION").to_string(),
            },
            started_at: timestamp(self.started),
            finished_at: timestamp(SystemTime::now()),
            files: self.files,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_atomic(&self.dir.join(MANIFEST_FILE), json.as_bytes())?;
        Ok(manifest)
    }
}
