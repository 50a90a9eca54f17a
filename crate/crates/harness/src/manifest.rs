//! Per-run provenance record written as `<out>/manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::config::HarnessConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: HarnessConfig,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub artifact_version: String,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
}

impl RunManifest {
    pub fn start(command: &str, args: Vec<String>, config: &HarnessConfig) -> Self {
        let now = Utc::now();
        Self {
            command: command.to_string(),
            args,
            config: config.clone(),
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: now,
            finished_at: now,
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) -> &mut Self {
        self.seeds.insert(name.to_string(), value);
        self
    }

    /// Stamps the finish time and writes the manifest, replacing any earlier one.
    pub fn finish(mut self, out_dir: &Path) -> io::Result<Self> {
        self.finished_at = Utc::now();
        fs::create_dir_all(out_dir)?;
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        fs::write(out_dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(self)
    }

    pub fn load(out_dir: &Path) -> io::Result<Self> {
        let text = fs::read_to_string(out_dir.join(MANIFEST_FILE))?;
        serde_json::from_str(&text).map_err(io::Error::other)
    }
}
