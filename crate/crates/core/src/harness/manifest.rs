//! What was run, and enough to run it again.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use time::format_description::well_known::Rfc3339;
use time::OffsetDateTime;

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::synthworld::Splits;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub encoder_seed: Option<u64>,
    pub dataset_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub config_hash: String,
    pub library_version: String,
    pub started: String,
    pub finished: String,
    pub seeds: Vec<SeedRecord>,
    /// The resolved config, seeds and output directory included.
    pub config: ExperimentConfig,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        m.config.validate()?;
        let hash = m.config.hash()?;
        if hash != m.config_hash {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                detail: format!("config hash {} does not match its config ({hash})", m.config_hash),
            });
        }
        Ok(m)
    }
}

pub fn now_rfc3339() -> String {
    OffsetDateTime::now_utc()
        .format(&Rfc3339)
        .unwrap_or_else(|_| "unknown".into())
}

/// SHA-256 over every sample's id, age, diagnosis and image bits, split by
/// split.
pub fn dataset_fingerprint(splits: &Splits) -> String {
    let mut h = Sha256::new();
    for (tag, split) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        h.update(tag.as_bytes());
        h.update((split.len() as u64).to_le_bytes());
        for s in split {
            h.update((s.id as u64).to_le_bytes());
            h.update(s.chron_age.to_le_bytes());
            h.update([s.diagnosis.label() as u8]);
            for px in &s.image {
                h.update(px.to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

/// A run input is either a plain config or a manifest from an earlier run.
pub fn load_run_input(path: &Path) -> Result<(ExperimentConfig, Option<RunManifest>)> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if value.get("config_hash").is_some() {
        let m = RunManifest::load(path)?;
        Ok((m.config.clone(), Some(m)))
    } else {
        Ok((ExperimentConfig::from_json(&text)?, None))
    }
}
