//! Run configuration: one TOML document with a `[global]` table and a
//! section per pipeline component.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::GridSpec;
use crate::canon::{canonical_json, fingerprint};
use crate::contrastive::ContrastiveConfig;
use crate::dataset::{ManifestParams, SynthConfig};
use crate::error::{Error, Result};
use crate::imitation::BCConfig;
use crate::scalar::DType;
use crate::seed::derive_seed;
use crate::supervised::JointConfig;

pub const DATA_ROOT_ENV: &str = "VIPROM_DATA_ROOT";
pub const SNAPSHOT_FILE: &str = "config.resolved.json";
pub const FINGERPRINT_FILE: &str = "config.fingerprint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlobalConfig {
    pub seed: u64,
    /// Falls back to `$VIPROM_DATA_ROOT`, then `data`.
    pub data_root: Option<PathBuf>,
    pub out_root: PathBuf,
    /// Desk-scale budgets (shorter behaviour cloning).
    pub toy: bool,
    pub precision: DType,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        Self { seed: 0, data_root: None, out_root: PathBuf::from("out"), toy: false, precision: DType::F32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub manifest: ManifestParams,
    pub synth: SynthConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub global: GlobalConfig,
    pub dataset: DatasetConfig,
    pub contrastive: ContrastiveConfig,
    pub supervised: JointConfig,
    pub imitation: BCConfig,
    pub bench: Option<GridSpec>,
}

/// Sections whose seed is derived from `global.seed` and may not be set.
const SEEDED: [&str; 3] = ["contrastive", "supervised", "dataset.synth"];

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for section in SEEDED {
            let mut t = Some(&raw);
            for part in section.split('.') {
                t = t.and_then(|t| t.get(part)).and_then(|v| v.as_table());
            }
            if t.is_some_and(|t| t.contains_key("seed")) {
                return Err(Error::Config(format!("`{section}.seed` is derived from `global.seed` and cannot be set")));
            }
        }
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Fill the data root, fan the global seed out to every component, and
    /// apply the toy budget when the imitation step count is left at its
    /// full-scale default.
    pub fn resolve(mut self) -> Self {
        if self.global.data_root.is_none() {
            let env = std::env::var_os(DATA_ROOT_ENV).filter(|v| !v.is_empty());
            self.global.data_root = Some(env.map_or_else(|| PathBuf::from("data"), PathBuf::from));
        }
        let s = self.global.seed;
        self.dataset.synth.seed = derive_seed(s, "dataset");
        self.contrastive.seed = derive_seed(s, "contrastive");
        self.supervised.seed = derive_seed(s, "supervised");
        if self.global.toy && self.imitation.steps == BCConfig::default().steps {
            self.imitation.steps = BCConfig::toy().steps;
        }
        self
    }

    pub fn data_root(&self) -> PathBuf {
        self.global.data_root.clone().unwrap_or_else(|| PathBuf::from("data"))
    }

    pub fn fingerprint(&self) -> Result<String> {
        fingerprint(self)
    }
}

/// Write the canonical snapshot and its fingerprint into `out_dir`.
pub fn snapshot_config(resolved: &RunConfig, out_dir: &Path) -> Result<String> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let fp = resolved.fingerprint()?;
    let snap = out_dir.join(SNAPSHOT_FILE);
    std::fs::write(&snap, canonical_json(resolved)?).map_err(|e| Error::io(&snap, e))?;
    let fpath = out_dir.join(FINGERPRINT_FILE);
    std::fs::write(&fpath, format!("{fp}\n")).map_err(|e| Error::io(&fpath, e))?;
    Ok(fp)
}
