use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Command;
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const MANIFEST_FORMAT: &str = "ord2seq-manifest-v1";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one command run: what was asked, what was resolved, and the
/// SHA-256 of every artifact written.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub tool_version: String,
    pub invocation: Command,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    /// Artifact path relative to the output directory, mapped to its digest.
    pub artifacts: BTreeMap<String, String>,
    pub duration_secs: f64,
    pub substitutions: Vec<String>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let m: RunManifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Config(format!("unknown manifest format `{}`", m.format)));
        }
        Ok(m)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Collects artifacts for a run rooted at one output directory.
pub(crate) struct Run {
    out: PathBuf,
    started: Instant,
    artifacts: BTreeMap<String, String>,
    substitutions: Vec<String>,
}

impl Run {
    pub fn start(out: &Path) -> Result<Self> {
        std::fs::create_dir_all(out)?;
        Ok(Run {
            out: out.to_path_buf(),
            started: Instant::now(),
            artifacts: BTreeMap::new(),
            substitutions: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        write_atomic(&path, bytes)?;
        self.artifacts.insert(name.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Registers a file that was written directly into the output directory.
    pub fn record(&mut self, name: &str) -> Result<()> {
        let bytes = std::fs::read(self.path(name))?;
        self.artifacts.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn substitute(&mut self, note: String) {
        if !self.substitutions.contains(&note) {
            self.substitutions.push(note);
        }
    }

    pub fn finish(self, invocation: &Command, config: serde_json::Value, seeds: Vec<u64>) -> Result<RunManifest> {
        let manifest = RunManifest {
            format: MANIFEST_FORMAT.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            invocation: invocation.clone(),
            config,
            seeds,
            artifacts: self.artifacts,
            duration_secs: self.started.elapsed().as_secs_f64(),
            substitutions: self.substitutions,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        write_atomic(&self.out.join(MANIFEST_FILE), text.as_bytes())?;
        Ok(manifest)
    }
}

/// Differences between the artifact digests of two manifests.
pub fn compare_artifacts(expected: &RunManifest, actual: &RunManifest) -> Vec<String> {
    let mut diffs = Vec::new();
    for (name, digest) in &expected.artifacts {
        match actual.artifacts.get(name) {
            None => diffs.push(format!("{name} (missing)")),
            Some(d) if d != digest => diffs.push(name.clone()),
            Some(_) => {}
        }
    }
    for name in actual.artifacts.keys() {
        if !expected.artifacts.contains_key(name) {
            diffs.push(format!("{name} (unexpected)"));
        }
    }
    diffs
}
