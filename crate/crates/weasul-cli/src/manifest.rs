//! Run-manifest persistence: config snapshot, seeds, and content hashes of
//! every file a command read or wrote, written atomically at run end.

use crate::config::AppConfig;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use weasul::trainer::IterationRecord;
use weasul::Result;

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: AppConfig,
    pub workers: usize,
    pub seeds: BTreeMap<String, u64>,
    /// path -> sha256 of content, for files the command read.
    pub inputs: BTreeMap<String, String>,
    /// path -> sha256 of content, for files the command wrote.
    pub outputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<Vec<IterationRecord>>,
}

pub struct ManifestBuilder {
    manifest: RunManifest,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: &AppConfig, workers: usize) -> Self {
        ManifestBuilder {
            manifest: RunManifest {
                command: command.to_string(),
                config: config.clone(),
                workers,
                seeds: BTreeMap::new(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                iterations: None,
            },
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.manifest.seeds.insert(name.to_string(), value);
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.manifest
            .inputs
            .insert(path.display().to_string(), file_sha256(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.manifest
            .outputs
            .insert(path.display().to_string(), file_sha256(path)?);
        Ok(())
    }

    pub fn iterations(&mut self, rows: &[IterationRecord]) {
        self.manifest.iterations = Some(rows.to_vec());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.manifest)?;
        let tmp = path.with_extension("tmp");
        std::fs::File::create(&tmp)?.write_all(json.as_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Manifest path next to an output file: `<file>.manifest.json`.
pub fn sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    path.with_file_name(name)
}
