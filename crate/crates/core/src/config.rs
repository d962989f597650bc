//! Experiment configuration: one TOML document, dotted-path overrides and
//! validation before anything runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::BucketSpec;
use crate::baseline_id::IdModelConfig;
use crate::corpus::{InputFormat, SyntheticSpec};
use crate::encoder::{EncoderConfig, LoraConfig};
use crate::error::{Error, Result};
use crate::evaluator::EvalConfig;
use crate::model::ModelKind;
use crate::pipeline::MixStrategy;
use crate::textualize::{Direction, InputVariant};
use crate::trainer::TrainConfig;

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "MDREC_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Files,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub interactions: Option<PathBuf>,
    pub items: Option<PathBuf>,
    pub format: InputFormat,
    pub synthetic: SyntheticSpec,
    /// Keep only these domains (all when empty).
    pub domains: Vec<String>,
    pub mix_strategy: MixStrategy,
    pub core_k: usize,
    pub max_items: usize,
    pub max_title_tokens: usize,
    pub min_token_freq: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            interactions: None,
            items: None,
            format: InputFormat::JsonLines,
            synthetic: SyntheticSpec::default(),
            domains: Vec::new(),
            mix_strategy: MixStrategy::UserMixed,
            core_k: 5,
            max_items: 10,
            max_title_tokens: 40,
            min_token_freq: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub variant: InputVariant,
    /// `vocab_size` of zero is filled from the vocabulary.
    pub encoder: EncoderConfig,
    /// `num_items` of zero is filled from the catalog.
    pub id: IdModelConfig,
    pub lora: Option<LoraConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Text,
            variant: InputVariant::Plain,
            encoder: EncoderConfig::default(),
            id: IdModelConfig::default(),
            lora: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub buckets: BucketSpec,
    pub exposure_k: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            buckets: BucketSpec::default(),
            exposure_k: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    /// Seeds model initialisation and training. Evaluation negatives keep
    /// their own seed so runs are compared on identical candidates.
    pub seed: u64,
    /// Seeds swept by recipes.
    pub recipe_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("runs/default"),
            seed: 1,
            recipe_seeds: vec![1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub analysis: AnalysisConfig,
    pub run: RunConfig,
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value` to a TOML table. The value is read as a TOML
/// literal and falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override path `{path}`")));
    }
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path `{path}` crosses a non-table value")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.source == DataSource::Files && (d.interactions.is_none() || d.items.is_none()) {
            return Err(Error::Config("data.source = files needs data.interactions and data.items".into()));
        }
        if d.source == DataSource::Synthetic {
            d.synthetic.validate()?;
        }
        if d.max_items == 0 || d.max_title_tokens == 0 {
            return Err(Error::Config("data.max_items and data.max_title_tokens must be positive".into()));
        }
        self.train.validate()?;
        self.eval.validate()?;
        self.analysis.buckets.validate()?;
        if self.analysis.exposure_k == 0 {
            return Err(Error::Config("analysis.exposure_k must be positive".into()));
        }
        if self.run.recipe_seeds.is_empty() {
            return Err(Error::Config("run.recipe_seeds must not be empty".into()));
        }
        let e = &self.model.encoder;
        if e.model_dim == 0 || e.num_heads == 0 || e.model_dim % e.num_heads != 0 {
            return Err(Error::Config("model.encoder.model_dim must be a multiple of num_heads".into()));
        }
        Ok(())
    }

    /// Output directory after applying [`OUTPUT_ROOT_ENV`].
    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.run.output_dir.is_relative() => PathBuf::from(root).join(&self.run.output_dir),
            _ => self.run.output_dir.clone(),
        }
    }

    /// Copy whose model and training seeds are derived from `run.seed`
    /// (the per-section seed fields are overwritten).
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let base = c.run.seed;
        // Kept below 2^63 so the snapshot stays valid TOML.
        let sub = |label: &str| crate::seed::derive_seed(base, label, &[]) & (i64::MAX as u64);
        c.model.encoder.seed = sub("model-init");
        c.model.id.seed = c.model.encoder.seed;
        c.train.seed = sub("train");
        c
    }

    /// Resolved copy for another seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.run.seed = seed;
        c.resolved()
    }

    pub fn direction(&self) -> Direction {
        self.model.encoder.direction
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}
