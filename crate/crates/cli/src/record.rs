//! Machine-readable `run.json` written by every command.

use std::collections::BTreeMap;
use std::path::Path;

use exgan_core::checkpoint::{config_hash, content_hash};
use exgan_core::data::load_manifest;
use exgan_core::Result;
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub arguments: Vec<String>,
    pub config_hash: String,
    pub deterministic: bool,
    /// SHA-256 of each input, keyed by the path as given.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub versions: BTreeMap<String, String>,
}

impl RunRecord {
    pub fn new<C: Serialize>(command: &str, config: &C, deterministic: bool) -> Self {
        let versions = [
            ("exgan".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("checkpoint_format".to_string(), "EXGANCK1".to_string()),
        ]
        .into();
        Self {
            command: command.into(),
            arguments: std::env::args().skip(1).collect(),
            config_hash: config_hash(config),
            deterministic,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            versions,
        }
    }

    pub fn input_file(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), content_hash(&std::fs::read(path)?));
        Ok(())
    }

    /// Hashes a manifest together with every image it names.
    pub fn input_manifest(&mut self, path: &Path) -> Result<()> {
        let load = load_manifest(path)?;
        let mut digests = content_hash(&std::fs::read(path)?);
        for record in &load.records {
            for entry in &record.images {
                digests.push_str(&content_hash(&std::fs::read(load.base_dir.join(&entry.path))?));
            }
        }
        self.inputs.insert(path.display().to_string(), content_hash(digests.as_bytes()));
        Ok(())
    }

    pub fn output_file(&mut self, path: &Path) -> Result<()> {
        self.outputs.insert(path.display().to_string(), content_hash(&std::fs::read(path)?));
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}
