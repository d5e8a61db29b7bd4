//! Resolved per-command configuration: defaults (or the tiny preset), then
//! the config file section, then environment and flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lgtse_core::Error;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub out: Option<PathBuf>,
    pub speakers: usize,
    pub utts: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    /// 0 picks a count from the corpus size
    pub noises: usize,
    pub test_fraction: f64,
    /// 0 means one triplet per target utterance
    pub train_triplets: usize,
    pub test_triplets: usize,
    pub sir_db: (f64, f64),
    pub snr_db: (f64, f64),
    pub enrollment_s: f64,
    pub seed: u64,
    pub tiny: bool,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            out: None,
            speakers: 8,
            utts: 8,
            duration_s: 2.0,
            sample_rate: 8000,
            noises: 0,
            test_fraction: 0.25,
            train_triplets: 0,
            test_triplets: 0,
            sir_db: (-5.0, 5.0),
            snr_db: (0.0, 15.0),
            enrollment_s: 2.0,
            seed: 0,
            tiny: false,
        }
    }
}

impl SimulateConfig {
    pub fn tiny() -> Self {
        Self {
            speakers: 4,
            utts: 8,
            duration_s: 1.0,
            tiny: true,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub corpus: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub mode: String,
    pub condition: Option<String>,
    pub denoiser_epochs: usize,
    pub backbone_epochs: usize,
    pub joint_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub w: f64,
    pub max_steps_per_stage: Option<usize>,
    pub seed: u64,
    pub tiny: bool,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            manifest: None,
            out: None,
            mode: "triplec-parallel".into(),
            condition: None,
            denoiser_epochs: 5,
            backbone_epochs: 5,
            joint_epochs: 10,
            batch_size: 4,
            lr: 5e-4,
            w: 50.0,
            max_steps_per_stage: None,
            seed: 0,
            tiny: false,
        }
    }
}

impl TrainRunConfig {
    pub fn tiny() -> Self {
        Self {
            denoiser_epochs: 1,
            backbone_epochs: 1,
            joint_epochs: 2,
            batch_size: 2,
            lr: 2e-3,
            tiny: true,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub checkpoint: Option<PathBuf>,
    pub stub: Option<String>,
    pub corpus: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub split: String,
    pub conditions: Vec<String>,
    pub out: Option<PathBuf>,
    pub formats: Vec<String>,
    pub probe: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            stub: None,
            corpus: None,
            manifest: None,
            split: "test".into(),
            conditions: vec!["1spk+noise".into(), "2spk".into(), "2spk+noise".into()],
            out: None,
            formats: vec!["markdown".into(), "csv".into(), "text".into()],
            probe: true,
        }
    }
}

/// Section of a TOML config file for one command.
pub fn file_section(path: Option<&Path>, section: &str) -> Result<toml::Table> {
    let Some(path) = path else {
        return Ok(toml::Table::new());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| Error::Usage(format!("config {}: {e}", path.display())))?;
    match table.remove(section) {
        Some(toml::Value::Table(t)) => Ok(t),
        Some(_) => Err(Error::Usage(format!("config section [{section}] is not a table")).into()),
        None => Ok(toml::Table::new()),
    }
}

/// Overlay `file` onto `base`, key by key.
pub fn overlay<T: Serialize + DeserializeOwned>(base: &T, file: &toml::Table) -> Result<T> {
    let mut merged = toml::Table::try_from(base).context("serializing defaults")?;
    for (k, v) in file {
        merged.insert(k.clone(), v.clone());
    }
    toml::Value::Table(merged)
        .try_into()
        .map_err(|e| Error::Usage(format!("config file: {e}")).into())
}

/// Whether the file section asks for the tiny preset.
pub fn file_wants_tiny(file: &toml::Table) -> bool {
    file.get("tiny").and_then(toml::Value::as_bool).unwrap_or(false)
}

/// Short hash of a resolved configuration, used to name run directories.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let bytes = serde_json::to_vec(cfg).unwrap_or_default();
    Sha256::digest(bytes).iter().take(6).map(|b| format!("{b:02x}")).collect()
}

/// Write the resolved configuration next to the run outputs.
pub fn dump<T: Serialize>(dir: &Path, command: &str, cfg: &T) -> Result<()> {
    let doc = serde_json::json!({ "command": command, "config": cfg });
    let path = dir.join(RUN_CONFIG);
    std::fs::write(&path, format!("{}\n", serde_json::to_string_pretty(&doc)?))
        .with_context(|| format!("writing {}", path.display()))
}

pub const RUN_CONFIG: &str = "run_config.json";
