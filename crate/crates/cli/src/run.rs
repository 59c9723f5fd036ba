//! Run directories and their manifests.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub code_version: String,
    pub started: String,
    pub finished: String,
    pub artifacts: Vec<Artifact>,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn code_version() -> String {
    format!("{}+{}", env!("CARGO_PKG_VERSION"), env!("MODELAB_GIT_REV"))
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

/// An open run directory collecting artifacts until [`Run::finish`].
pub struct Run {
    pub dir: PathBuf,
    command: String,
    seed: u64,
    config: serde_json::Value,
    started: DateTime<Utc>,
    artifacts: Vec<Artifact>,
    finished: bool,
}

impl Run {
    /// Creates `workdir/<command>/<timestamp>-<seed>`, adding a numeric
    /// suffix when a concurrent run already took the name.
    pub fn create(workdir: &Path, command: &str, seed: u64, config: &impl Serialize) -> Result<Self> {
        let started = Utc::now();
        let parent = workdir.join(command);
        fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
        let stem = format!("{}-{seed}", started.format("%Y%m%dT%H%M%S%.3fZ"));
        let mut n = 0;
        let dir = loop {
            let name = if n == 0 { stem.clone() } else { format!("{stem}-{n}") };
            let dir = parent.join(name);
            match fs::create_dir(&dir) {
                Ok(()) => break dir,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => n += 1,
                Err(e) => return Err(e).with_context(|| format!("creating {}", dir.display())),
            }
        };
        Ok(Self {
            dir,
            command: command.to_string(),
            seed,
            config: serde_json::to_value(config)?,
            started,
            artifacts: Vec::new(),
            finished: false,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Hashes an artifact that has been written under the run directory.
    pub fn record(&mut self, name: &str) -> Result<PathBuf> {
        let path = self.path(name);
        let (sha256, bytes) = sha256_file(&path)?;
        self.artifacts.push(Artifact { path: name.to_string(), sha256, bytes });
        Ok(path)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        fs::write(self.path(name), bytes).with_context(|| format!("writing {name}"))?;
        self.record(name)
    }

    pub fn write_with(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> modelab_core::Result<()>) -> Result<PathBuf> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)
    }

    /// Writes the manifest. Manifests are created once and never rewritten.
    pub fn finish(mut self) -> Result<PathBuf> {
        let manifest = RunManifest {
            command: self.command.clone(),
            config: self.config.clone(),
            seed: self.seed,
            code_version: code_version(),
            started: self.started.to_rfc3339_opts(SecondsFormat::Millis, true),
            finished: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
            artifacts: std::mem::take(&mut self.artifacts),
        };
        let path = self.dir.join(MANIFEST);
        let mut f: File = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| format!("creating {}", path.display()))?;
        f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        f.write_all(b"\n")?;
        self.finished = true;
        Ok(self.dir.clone())
    }
}

/// A run that fails before its manifest is written leaves nothing behind.
impl Drop for Run {
    fn drop(&mut self) {
        if !self.finished {
            let _ = fs::remove_dir_all(&self.dir);
        }
    }
}
