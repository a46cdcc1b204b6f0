//! Seed expansion and JSON manifests that record how each artifact was made.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

pub const TOOL: &str = "pi-esn";

/// Independent per-purpose seeds derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub weights: u64,
    pub noise: u64,
    pub ensemble: u64,
}

/// First 8 bytes of `sha256(master ‖ purpose)`.
pub fn derive_seed(master: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(purpose.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

impl Seeds {
    pub fn expand(master: u64) -> Self {
        Self {
            master,
            weights: derive_seed(master, "weights"),
            noise: derive_seed(master, "noise"),
            ensemble: derive_seed(master, "ensemble"),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the canonical JSON form of the configuration.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    sha256_hex(&serde_json::to_vec(cfg).expect("config serializes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub seeds: Seeds,
    /// Output file name → sha256 of its contents.
    #[serde(default)]
    pub files: BTreeMap<String, String>,
    /// Command-specific facts (input paths, divergence flags, optimizer outcome).
    #[serde(default)]
    pub details: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &ExperimentConfig, seeds: Seeds) -> Self {
        Self {
            tool: TOOL.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_hash: config_hash(cfg),
            config: cfg.clone(),
            seeds,
            files: BTreeMap::new(),
            details: BTreeMap::new(),
        }
    }

    pub fn detail(&mut self, key: &str, value: impl Serialize) {
        self.details.insert(key.into(), serde_json::to_value(value).expect("detail serializes"));
    }

    /// Records `path` (relative to `root` in the manifest) with its content hash.
    pub fn record(&mut self, root: &Path, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
        let name = path.strip_prefix(root).unwrap_or(path).to_string_lossy().into_owned();
        self.files.insert(name, sha256_hex(&bytes));
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Output root: `--out`, then the config's `output`, then `$PI_ESN_OUT`, then `./runs`.
pub fn output_root(flag: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.output.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

pub const OUT_ENV: &str = "PI_ESN_OUT";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SystemName;

    #[test]
    fn seeds_are_distinct_and_stable() {
        let s = Seeds::expand(42);
        assert_eq!(s, Seeds::expand(42));
        assert_ne!(s.weights, s.noise);
        assert_ne!(s.noise, s.ensemble);
        assert_ne!(Seeds::expand(43).weights, s.weights);
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = ExperimentConfig::defaults(SystemName::Lorenz);
        let mut b = a.clone();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.n_x = 201;
        assert_ne!(config_hash(&a), config_hash(&b));
    }
}
