//! Output directories and run manifests.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tvc_core::trainer::RunConfig;

pub const MANIFEST: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "tvc-manifest";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

pub fn digest(path: &Path) -> Result<FileDigest> {
    let data = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&data)),
        bytes: data.len() as u64,
    })
}

/// Record of one command invocation. Output paths are relative to the
/// directory holding the manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub tool_version: String,
    pub command: String,
    pub args: Vec<String>,
    /// Absent for commands that only reshape existing artifacts.
    pub seed: Option<u64>,
    pub config: Option<serde_json::Value>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// An output directory that remembers what was written into it.
pub struct OutDir {
    pub dir: PathBuf,
    command: String,
    started: u64,
    inputs: Vec<FileDigest>,
    written: Vec<String>,
}

impl OutDir {
    pub fn create(dir: &Path, command: &str) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf(), command: command.into(), started: now(), inputs: Vec::new(), written: Vec::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(digest(path)?);
        Ok(())
    }

    pub fn inputs(&mut self, digests: impl IntoIterator<Item = FileDigest>) {
        self.inputs.extend(digests);
    }

    /// Writes through a temporary file so readers never see a partial file.
    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
        fs::rename(&tmp, &path).with_context(|| format!("renaming {}", tmp.display()))?;
        self.record(name);
        Ok(())
    }

    /// Registers a file written by other means.
    pub fn record(&mut self, name: &str) {
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
    }

    pub fn finish(self, config: Option<&RunConfig>) -> Result<RunManifest> {
        let mut outputs = Vec::with_capacity(self.written.len());
        for name in &self.written {
            let mut d = digest(&self.path(name))?;
            d.path = name.clone();
            outputs.push(d);
        }
        let manifest = RunManifest {
            format: MANIFEST_FORMAT.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: self.command,
            args: std::env::args().skip(1).collect(),
            seed: config.map(|c| c.seed),
            config: config.map(|c| serde_json::to_value(c).expect("config serializes")),
            started_unix: self.started,
            finished_unix: now(),
            inputs: self.inputs,
            outputs,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(self.dir.join(MANIFEST), text).with_context(|| format!("writing manifest in {}", self.dir.display()))?;
        Ok(manifest)
    }
}
