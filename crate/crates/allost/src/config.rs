//! Experiment configuration: one TOML file with `[model]`, `[train]` and
//! `[data]` sections. Resolution order is command-line override, then
//! file, then built-in default. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use allost_core::model::{FusionMode, ModelConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, IoContext, Result};
use crate::trainer::TrainConfig;

/// Model hyperparameters. Vocabulary sizes come from the tokenizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub acoustic_layers: usize,
    pub phone_layers: usize,
    pub decoder_layers: usize,
    pub conv_kernel: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub fusion_mode: String,
    pub acoustic_feature_dim: usize,
    pub subsample_factor: usize,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            d_model: m.d_model,
            heads: m.heads,
            ffn_dim: m.ffn_dim,
            acoustic_layers: m.acoustic_layers,
            phone_layers: m.phone_layers,
            decoder_layers: m.decoder_layers,
            conv_kernel: m.conv_kernel,
            dropout: m.dropout,
            label_smoothing: m.label_smoothing,
            fusion_mode: m.fusion_mode.to_string(),
            acoustic_feature_dim: m.acoustic_feature_dim,
            subsample_factor: m.subsample_factor,
            init_seed: 1,
        }
    }
}

impl ModelSection {
    pub fn fusion(&self) -> Result<FusionMode> {
        self.fusion_mode
            .parse()
            .map_err(|_| Error::config(format!("model.fusion_mode: unknown value {:?}", self.fusion_mode)))
    }

    pub fn to_model_config(&self, phone_vocab: usize, target_vocab: usize) -> Result<ModelConfig> {
        let c = ModelConfig {
            d_model: self.d_model,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            acoustic_layers: self.acoustic_layers,
            phone_layers: self.phone_layers,
            decoder_layers: self.decoder_layers,
            conv_kernel: self.conv_kernel,
            dropout: self.dropout,
            label_smoothing: self.label_smoothing,
            fusion_mode: self.fusion()?,
            acoustic_feature_dim: self.acoustic_feature_dim,
            phone_vocab,
            target_vocab,
            subsample_factor: self.subsample_factor,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train_manifest: PathBuf,
    pub valid_manifest: PathBuf,
    pub phone_tokenizer: PathBuf,
    pub target_tokenizer: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train_manifest: "data/train.jsonl".into(),
            valid_manifest: "data/valid.jsonl".into(),
            phone_tokenizer: "data/phones.bpe".into(),
            target_tokenizer: "data/target.bpe".into(),
            run_dir: "runs/default".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: DataSection,
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses `value` as a TOML literal, falling back to a bare string.
fn parse_value(value: &str) -> Value {
    format!("v = {value}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()))
}

impl ExperimentConfig {
    /// Defaults, overlaid by `file` if given, overlaid by `overrides` of the
    /// form `("section.key", "value")`.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = Table::try_from(Self::default()).expect("defaults serialize");
        if let Some(path) = file {
            let text = fs::read_to_string(path).at(path)?;
            let parsed: Table = text
                .parse()
                .map_err(|e| Error::config(format!("{}: {e}", path.display()).replace('\n', " ")))?;
            merge(&mut table, parsed);
        }
        for (key, value) in overrides {
            let (section, field) = key
                .split_once('.')
                .ok_or_else(|| Error::config(format!("override {key:?} must look like section.key")))?;
            let Some(Value::Table(t)) = table.get_mut(section) else {
                return Err(Error::config(format!("unknown config section {section:?}")));
            };
            t.insert(field.to_string(), parse_value(value));
        }
        let cfg: Self = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string().replace('\n', " ")))?;
        cfg.model.fusion()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the resolved configuration into `dir/config.toml`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).at(dir)?;
        let path = dir.join("config.toml");
        fs::write(&path, self.to_toml()).at(&path)?;
        Ok(path)
    }
}
