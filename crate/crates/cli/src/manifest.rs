//! Run manifests and small output helpers.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

/// One processed image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub input: PathBuf,
    /// Relative to the run directory.
    pub output: Option<PathBuf>,
    pub scores: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    /// Named artifacts, relative to the run directory.
    pub artifacts: BTreeMap<String, PathBuf>,
    pub report: Option<PathBuf>,
    pub records: Vec<ImageRecord>,
}

impl RunManifest {
    pub fn new(command: &str, config_hash: String, seed: u64) -> Self {
        Self {
            command: command.into(),
            config_hash,
            seed,
            artifacts: BTreeMap::new(),
            report: None,
            records: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }

    /// Writes `manifest.json` into `dir` after checking every listed path exists.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let listed = self
            .artifacts
            .values()
            .chain(self.report.iter())
            .chain(self.records.iter().filter_map(|r| r.output.as_ref()));
        for rel in listed {
            if !dir.join(rel).exists() {
                bail!("manifest lists missing file {}", dir.join(rel).display());
            }
        }
        let path = dir.join(MANIFEST_FILE);
        write_json(&path, self)?;
        Ok(path)
    }

    /// Output paths made absolute against the manifest's directory.
    pub fn outputs(&self, dir: &Path) -> Vec<PathBuf> {
        self.records
            .iter()
            .filter_map(|r| r.output.as_ref().map(|o| dir.join(o)))
            .collect()
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
