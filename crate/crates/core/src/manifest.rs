//! Manifests written next to generated datasets.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::world::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub file: String,
    pub sha256: String,
    pub scenes: usize,
    pub paragraphs: usize,
    pub sentences: usize,
}

impl DatasetEntry {
    pub fn new(file: &str, bytes: &[u8], ds: &Dataset) -> Self {
        Self {
            file: file.to_string(),
            sha256: sha256_hex(bytes),
            scenes: ds.scenes.len(),
            paragraphs: ds.samples.len(),
            sentences: ds.samples.iter().map(|s| s.k()).sum(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config_hash: String,
    pub train: DatasetEntry,
    pub eval: DatasetEntry,
}

impl Manifest {
    pub fn new(cfg: &RunConfig, train: DatasetEntry, eval: DatasetEntry) -> Self {
        Self { seed: cfg.seed, config_hash: cfg.hash(), train, eval }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises")
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
