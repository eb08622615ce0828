use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use fenkit::seed::hash64;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub checksum: String,
}

impl FileRecord {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(FileRecord {
            path: path.to_path_buf(),
            checksum: format!("{:016x}", hash64(&bytes)),
        })
    }
}

/// Record of one command invocation. The only place wall-clock data is kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub tool_version: String,
    pub started_unix_s: u64,
    pub wall_clock_ms: f64,
}

pub struct RunRecorder {
    command: String,
    config_hash: u64,
    seeds: Vec<u64>,
    inputs: Vec<FileRecord>,
    started_unix_s: u64,
    start: Instant,
}

impl RunRecorder {
    pub fn start<T: Serialize>(command: &str, args: &T, seeds: Vec<u64>) -> Self {
        RunRecorder {
            command: command.to_string(),
            config_hash: fenkit::seed::hash_json(args),
            seeds,
            inputs: Vec::new(),
            started_unix_s: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            start: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileRecord::of(path)?);
        Ok(())
    }

    /// Writes the manifest for `outputs` to `path`.
    pub fn finish(self, outputs: &[&Path], path: &Path) -> Result<()> {
        let manifest = RunManifest {
            command: self.command,
            config_hash: format!("{:016x}", self.config_hash),
            seeds: self.seeds,
            inputs: self.inputs,
            outputs: outputs.iter().map(|p| FileRecord::of(p)).collect::<Result<_>>()?,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix_s: self.started_unix_s,
            wall_clock_ms: self.start.elapsed().as_secs_f64() * 1e3,
        };
        fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

/// `<out>.manifest.json` next to a primary output file.
pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}
