//! Append-only run directories and their manifests.

use std::fs::{self, File};
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub size: u64,
    pub sha256: String,
}

impl FileEntry {
    pub fn of(path: &Path, recorded_as: String) -> CliResult<Self> {
        let mut f = File::open(path).map_err(|e| CliError::io(path, e))?;
        let mut h = Sha256::new();
        let size = io::copy(&mut f, &mut h).map_err(|e| CliError::io(path, e))?;
        Ok(Self {
            path: recorded_as,
            size,
            sha256: format!("{:x}", h.finalize()),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Fully resolved settings; replaying them reproduces the outputs.
    pub config: Value,
    pub seeds: Vec<u64>,
    /// Package version and sha256 of the executable.
    pub artifact_version: String,
    pub started: String,
    pub finished: String,
    /// Worker threads used; outputs do not depend on it.
    pub workers: usize,
    pub inputs: Vec<FileEntry>,
    /// Paths relative to the run directory.
    pub outputs: Vec<FileEntry>,
}

impl RunManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let path = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
    }

    /// Every listed output exists under `dir` with its recorded size.
    pub fn verify_outputs(&self, dir: &Path) -> CliResult<()> {
        for entry in &self.outputs {
            let p = dir.join(&entry.path);
            let meta = fs::metadata(&p).map_err(|e| CliError::io(&p, e))?;
            if meta.len() != entry.size {
                return Err(CliError::data(format!(
                    "{}: size {} does not match the manifest's {}",
                    p.display(),
                    meta.len(),
                    entry.size
                )));
            }
        }
        Ok(())
    }

    /// Recorded inputs still have the same content.
    pub fn verify_inputs(&self) -> CliResult<()> {
        for entry in &self.inputs {
            let now = FileEntry::of(Path::new(&entry.path), entry.path.clone())?;
            if now != *entry {
                return Err(CliError::data(format!("input {} changed since the run", entry.path)));
            }
        }
        Ok(())
    }
}

fn artifact_version() -> String {
    let version = concat!("ibrobust-cli ", env!("CARGO_PKG_VERSION"));
    match std::env::current_exe().ok().and_then(|p| FileEntry::of(&p, String::new()).ok()) {
        Some(e) => format!("{version} sha256:{}", e.sha256),
        None => version.to_string(),
    }
}

fn now() -> chrono::DateTime<chrono::Utc> {
    chrono::Utc::now()
}

/// A fresh output directory that collects inputs and outputs for the
/// manifest.
pub struct RunDir {
    path: PathBuf,
    command: String,
    started: String,
    inputs: Vec<FileEntry>,
    outputs: Vec<PathBuf>,
}

impl RunDir {
    /// `<base>/<command>-<UTC timestamp>`, never reusing an existing name.
    pub fn create(base: &Path, command: &str) -> CliResult<Self> {
        fs::create_dir_all(base).map_err(|e| CliError::io(base, e))?;
        let start = now();
        let stem = format!("{command}-{}", start.format("%Y%m%dT%H%M%S%.6fZ"));
        let mut path = base.join(&stem);
        let mut k = 1;
        loop {
            match fs::create_dir(&path) {
                Ok(()) => break,
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                    path = base.join(format!("{stem}-{k}"));
                    k += 1;
                }
                Err(e) => return Err(CliError::io(&path, e)),
            }
        }
        Ok(Self {
            path,
            command: command.to_string(),
            started: start.to_rfc3339(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    /// Path for output `rel`, registered for the inventory.
    pub fn output(&mut self, rel: impl AsRef<Path>) -> CliResult<PathBuf> {
        let rel = rel.as_ref().to_path_buf();
        let full = self.path.join(&rel);
        if let Some(parent) = full.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        if !self.outputs.contains(&rel) {
            self.outputs.push(rel);
        }
        Ok(full)
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        let shown = path.display().to_string();
        if !self.inputs.iter().any(|e| e.path == shown) {
            self.inputs.push(FileEntry::of(path, shown)?);
        }
        Ok(())
    }

    /// Remove a run that failed before writing its manifest.
    pub fn discard(self) {
        let _ = fs::remove_dir_all(&self.path);
    }

    /// Write the manifest and return the run directory.
    pub fn finish(self, config: Value, seeds: Vec<u64>) -> CliResult<PathBuf> {
        let outputs = self
            .outputs
            .iter()
            .map(|rel| FileEntry::of(&self.path.join(rel), rel.to_string_lossy().replace('\\', "/")))
            .collect::<CliResult<Vec<_>>>()?;
        let manifest = RunManifest {
            command: self.command,
            config,
            seeds,
            artifact_version: artifact_version(),
            started: self.started,
            finished: now().to_rfc3339(),
            workers: rayon::current_num_threads(),
            inputs: self.inputs,
            outputs,
        };
        let path = self.path.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(self.path)
    }
}
