//! Experiment orchestration: configuration, staged runs, sweeps, reports.
//!
//! A run directory holds a resolved config snapshot, one stamp per finished
//! stage, and every artifact a later stage reads. A stage whose stamp key
//! matches the current inputs is skipped.

mod pipeline;
mod report;
mod sweep;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::AdapterConfig;
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::judge::JudgeConfig;
use crate::model::{LmSpec, PositionKind};
use crate::trainer::{PretrainConfig, TrainConfig};
pub use pipeline::{run_pipeline, run_stage, InversionRecord, Stage, StageOutcome};
pub use report::{emit_report, exceedance, Report, ReportRow, RunSummary};
pub use sweep::{layer_mapping, run_sweep, SweepAxis, SweepCell, SweepTable, REFERENCE_DEPTH};

/// Architecture of a toy model; the vocabulary comes from the tokenizer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    /// Load this checkpoint instead of pretraining.
    pub checkpoint: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            max_seq: 128,
            checkpoint: None,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, vocab_size: usize) -> LmSpec {
        LmSpec {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            vocab_size,
            max_seq: self.max_seq,
            position_kind: PositionKind::LearnedAbsolute,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSettings {
    pub f: f64,
    /// Projected token count; defaults to `n`.
    pub k: Option<usize>,
}

impl Default for AdapterSettings {
    fn default() -> Self {
        AdapterSettings { f: 0.5, k: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OodSettings {
    pub count: usize,
    /// Tokens generated per OOD inversion.
    pub max_new: usize,
}

impl Default for OodSettings {
    fn default() -> Self {
        OodSettings {
            count: 100,
            max_new: 24,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds every stochastic step of the run.
    pub seed: u64,
    pub out: PathBuf,
    /// Plain-text files, one document per line. Empty selects the built-in
    /// synthetic encyclopedia.
    pub corpus: Vec<PathBuf>,
    pub synthetic_articles: usize,
    pub vocab_size: usize,
    pub target: ModelConfig,
    /// Separate decoding model; absent means the target decodes itself.
    pub decoder: Option<ModelConfig>,
    pub pretrain: PretrainConfig,
    pub layer: usize,
    pub n: usize,
    /// Prepend BOS when capturing representations.
    pub bos: bool,
    pub adapter: AdapterSettings,
    pub train: TrainConfig,
    pub judge: JudgeConfig,
    /// Cap on training pairs.
    pub train_size: Option<usize>,
    /// Held-out pairs; defaults to 1000 or 10% of the available pairs.
    pub test_size: Option<usize>,
    pub ood: OodSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            corpus: Vec::new(),
            synthetic_articles: 4000,
            vocab_size: 512,
            target: ModelConfig::default(),
            decoder: None,
            pretrain: PretrainConfig::default(),
            layer: 2,
            n: 16,
            bos: false,
            adapter: AdapterSettings::default(),
            train: TrainConfig::default(),
            judge: JudgeConfig::default(),
            train_size: Some(20_000),
            test_size: None,
            ood: OodSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key.path=value` overrides; values parse as TOML and fall
    /// back to plain strings.
    pub fn with_overrides(&self, sets: &[String]) -> Result<Self> {
        let mut doc = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for s in sets {
            let (key, raw) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let mut node = &mut doc;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = node.as_table_mut().ok_or_else(|| {
                    Error::Config(format!("`{key}`: `{part}` is not inside a table"))
                })?;
                if i + 1 == parts.len() {
                    table.insert(part.to_string(), value.clone());
                    break;
                }
                node = table
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(Default::default()));
            }
        }
        let text = toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml(&text)
    }

    /// Checks everything that does not need the tokenizer.
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        if self.layer == 0 || self.layer > self.target.n_layers {
            return Err(Error::Layer {
                layer: self.layer,
                n_layers: self.target.n_layers,
            });
        }
        if self.n + usize::from(self.bos) > self.target.max_seq {
            return Err(Error::Length {
                len: self.n + usize::from(self.bos),
                max: self.target.max_seq,
            });
        }
        self.adapter_config().validate()?;
        self.train.validate()?;
        self.judge.validate()?;
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.adapter.k.unwrap_or(self.n)
    }

    pub fn decoder_model(&self) -> &ModelConfig {
        self.decoder.as_ref().unwrap_or(&self.target)
    }

    pub fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig {
            dropout: self.train.dropout,
            ..AdapterConfig::new(
                self.target.d_model,
                self.decoder_model().d_model,
                self.adapter.f,
                self.k(),
            )
        }
    }

    /// Sub-configs carry their own seeds; the global seed wins.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.pretrain.seed = c.seed;
        c.train.seed = c.seed;
        c
    }
}

/// Hex SHA-256 of the JSON encoding of `parts`.
pub(crate) fn stamp_key(parts: &[serde_json::Value]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(serde_json::to_vec(p).expect("json"));
        h.update([0u8]);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Paths of a run. `shared` holds corpus, tokenizer, and models and may be
/// shared by several runs; `dir` holds everything else.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    pub shared: PathBuf,
    pub dir: PathBuf,
}

impl RunDir {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        let dir = dir.into();
        RunDir {
            shared: dir.clone(),
            dir,
        }
    }

    pub fn docs(&self) -> PathBuf {
        self.shared.join("docs.txt")
    }
    pub fn tokenizer(&self) -> PathBuf {
        self.shared.join("tokenizer.txt")
    }
    pub fn target_lm(&self) -> PathBuf {
        self.shared.join("lm_target.bin")
    }
    pub fn decoder_lm(&self) -> PathBuf {
        self.shared.join("lm_decoder.bin")
    }
    pub fn data(&self) -> PathBuf {
        self.dir.join("data")
    }
    pub fn adapter(&self) -> PathBuf {
        self.dir.join("adapter.bin")
    }
    pub fn joint_adapter(&self) -> PathBuf {
        self.dir.join("adapter_joint.bin")
    }
    pub fn lora(&self) -> PathBuf {
        self.dir.join("lora.bin")
    }
    pub fn inversions(&self) -> PathBuf {
        self.dir.join("inversions.jsonl")
    }
    pub fn records(&self) -> PathBuf {
        self.dir.join("records.jsonl")
    }
    pub fn summary(&self) -> PathBuf {
        self.dir.join("summary.json")
    }
    pub fn ood(&self) -> PathBuf {
        self.dir.join("ood")
    }
    pub fn config_snapshot(&self) -> PathBuf {
        self.dir.join("config.toml")
    }

    fn stamp_path(&self, stage: Stage) -> PathBuf {
        let base = if stage.is_shared() {
            &self.shared
        } else {
            &self.dir
        };
        base.join("stamps").join(format!("{}.json", stage.name()))
    }

    pub(crate) fn stamp(&self, stage: Stage) -> Option<String> {
        let text = std::fs::read_to_string(self.stamp_path(stage)).ok()?;
        let v: serde_json::Value = serde_json::from_str(&text).ok()?;
        v["key"].as_str().map(String::from)
    }

    pub(crate) fn write_stamp(&self, stage: Stage, key: &str) -> Result<()> {
        let body = serde_json::json!({ "stage": stage.name(), "key": key });
        write_atomic(
            &self.stamp_path(stage),
            serde_json::to_string_pretty(&body)?.as_bytes(),
        )
    }

    pub(crate) fn clear_stamp(&self, stage: Stage) -> Result<()> {
        let p = self.stamp_path(stage);
        match std::fs::remove_file(&p) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(Error::io(p, e)),
        }
    }
}
