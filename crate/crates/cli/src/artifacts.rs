use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use yldcvt::model::{ModelConfig, ModelPreset};
use yldcvt::train::{History, Metrics, TargetScaler, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub path: PathBuf,
    pub sha256: String,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSeeds {
    pub year: i32,
    pub run: usize,
    pub split: u64,
    pub init: u64,
    pub shuffle: u64,
}

/// Everything needed to re-run a `train` invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub preset: ModelPreset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub param_count: usize,
    pub in_year: bool,
    pub test_years: Vec<i32>,
    pub dataset: DatasetRef,
    pub seed: u64,
    pub cells: Vec<CellSeeds>,
    pub build: String,
    pub duration_secs: f64,
}

/// Sidecar of a checkpoint file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub preset: ModelPreset,
    pub model: ModelConfig,
    pub in_year: bool,
    pub year: i32,
    pub run: usize,
    pub scaler: TargetScaler,
    pub seeds: CellSeeds,
    pub best_epoch: usize,
    pub test_metrics: Metrics,
    pub history: History,
    pub build: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn checkpoint_path(dir: &Path, year: i32, run: usize) -> PathBuf {
    dir.join(format!("{year}-run{run}.yldh"))
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}
