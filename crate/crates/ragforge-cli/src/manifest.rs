//! Run provenance. Every command that owns an output directory writes
//! exactly one `manifest.json` there: the command line, a digest of the
//! resolved configuration, digests of every input artifact, the seed, and
//! format versions — enough to audit or replay the run.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Serialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub command: String,
    pub command_line: Vec<String>,
    pub seed: Option<u64>,
    /// Digest of the fully resolved configuration (defaults applied), not
    /// of the raw file, so replays compare what actually ran.
    pub config_digest: Option<String>,
    /// Label → SHA-256 for every input the command consumed.
    pub data_digests: BTreeMap<String, String>,
    pub artifact_versions: BTreeMap<String, String>,
    pub started_at_unix: u64,
    pub finished_at_unix: u64,
}

impl RunManifest {
    pub fn begin(command: &str) -> Self {
        let mut artifact_versions = BTreeMap::new();
        artifact_versions.insert("cli".to_string(), env!("CARGO_PKG_VERSION").to_string());
        artifact_versions.insert(
            "checkpoint_format".to_string(),
            ragforge_core::trainer::CHECKPOINT_FORMAT_VERSION.to_string(),
        );
        RunManifest {
            format_version: MANIFEST_FORMAT_VERSION,
            command: command.to_string(),
            command_line: std::env::args().collect(),
            seed: None,
            config_digest: None,
            data_digests: BTreeMap::new(),
            artifact_versions,
            started_at_unix: unix_now(),
            finished_at_unix: 0,
        }
    }

    pub fn digest_file(&mut self, label: &str, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)
            .with_context(|| format!("digesting {label} file {}", path.display()))?;
        self.data_digests
            .insert(label.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    /// Records a digest computed elsewhere (e.g. a knowledge base's own
    /// canonical digest).
    pub fn record_digest(&mut self, label: &str, digest: &str) {
        self.data_digests
            .insert(label.to_string(), digest.to_string());
    }

    pub fn set_config<T: Serialize>(&mut self, config: &T) {
        let json = serde_json::to_string(config).expect("config serializes");
        self.config_digest = Some(sha256_hex(json.as_bytes()));
    }

    /// Writes the directory's single `manifest.json`.
    pub fn finish(mut self, dir: &Path) -> Result<()> {
        self.finished_at_unix = unix_now();
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self).expect("manifest serializes");
        std::fs::write(&path, json + "\n")
            .with_context(|| format!("writing manifest {}", path.display()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in out {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
