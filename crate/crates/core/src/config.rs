//! Run configuration: one TOML tree, named presets, dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbones::{BackboneConfig, Family};
use crate::datasets::{PreprocessConfig, SyntheticSpec};
use crate::error::{Error, Result};
use crate::mapper::MapperConfig;
use crate::metrics::DEFAULT_FPR_CAP;
use crate::model::ModelConfig;
use crate::scoring::ScoreConfig;
use crate::tfm::TfmConfig;
use crate::tokenizer::TokenizerConfig;
use crate::training::TrainConfig;

/// Overrides `data.root`.
pub const ENV_DATA_ROOT: &str = "GTRANS_DATA_ROOT";
/// Overrides `paths.weight_cache`.
pub const ENV_WEIGHT_CACHE: &str = "GTRANS_WEIGHT_CACHE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Generated in memory from `data.synthetic`.
    Synthetic,
    /// An MVTec-style directory tree under `data.root/<category>`.
    Mvtec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    pub category: String,
    /// Share of `train/good` used for fitting; the rest is validation.
    pub train_fraction: f64,
    pub preprocess: PreprocessConfig,
    pub synthetic: SyntheticSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    pub fpr_cap: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_cache: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub tokenizer: TokenizerConfig,
    pub tfm: TfmConfig,
    pub mapper: MapperConfig,
    pub training: TrainConfig,
    pub score: ScoreConfig,
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Full-scale settings: ResNet-34, stages 1-3, g = 8, d = 256, S = 2, 256 → 224, 300 epochs.
    pub fn full() -> Self {
        Self {
            seed: 0,
            data: DataConfig {
                source: DataSource::Mvtec,
                root: None,
                category: "bottle".into(),
                train_fraction: 0.9,
                preprocess: PreprocessConfig::default(),
                synthetic: SyntheticSpec::default(),
            },
            backbone: BackboneConfig { family: Family::Resnet34, critical_layers: vec![1, 2, 3], pretrained: true },
            tokenizer: TokenizerConfig::default(),
            tfm: TfmConfig::default(),
            mapper: MapperConfig::default(),
            training: TrainConfig::default(),
            score: ScoreConfig::default(),
            metrics: MetricsConfig { fpr_cap: DEFAULT_FPR_CAP },
            paths: PathsConfig::default(),
        }
    }

    /// Desk scale: tiny backbone on 64×64 synthetic textures.
    pub fn toy() -> Self {
        let mut c = Self::full();
        c.data.source = DataSource::Synthetic;
        c.data.category = "synthetic".into();
        c.data.preprocess.resize_edge = 64;
        c.data.preprocess.crop_size = 64;
        c.backbone.family = Family::TinyTest;
        c.tokenizer.dim = 32;
        c.training.epochs = 30;
        c.training.batch_size = 8;
        c.seed = 7;
        c
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" | "full" => Some(Self::full()),
            "toy" => Some(Self::toy()),
            _ => None,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            tokenizer: self.tokenizer.clone(),
            tfm: self.tfm.clone(),
            mapper: self.mapper.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.data.preprocess.validate()?;
        if self.data.source == DataSource::Synthetic {
            self.data.synthetic.validate().map_err(|e| Error::config(e.to_string()))?;
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction <= 1.0) {
            return Err(Error::config("data.train_fraction must lie in (0, 1]"));
        }
        let stride = BackboneConfig::stride_of(*self.backbone.critical_layers.last().expect("validated"));
        if self.data.preprocess.crop_size % stride != 0 {
            return Err(Error::config(format!(
                "data.preprocess.crop_size {} is not divisible by the backbone stride {stride}",
                self.data.preprocess.crop_size
            )));
        }
        self.training.validate()?;
        self.score.validate(&self.backbone.critical_layers)?;
        if !(self.metrics.fpr_cap > 0.0 && self.metrics.fpr_cap <= 1.0) {
            return Err(Error::config("metrics.fpr_cap must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }
}

/// Parses `raw` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(tree: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("malformed override key `{key}`")));
    }
    let mut node = tree;
    for part in &parts[..parts.len() - 1] {
        let entry = node.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override `{key}`: `{part}` is not a section")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Where settings come from, lowest precedence first: preset or file, environment, overrides.
#[derive(Debug, Clone, Default)]
pub struct ConfigSources {
    /// A preset name (`default`, `toy`) or a TOML file merged onto `default`.
    pub base: Option<String>,
    /// `key=value` pairs with dotted keys.
    pub overrides: Vec<String>,
    pub data_root: Option<PathBuf>,
    pub weight_cache: Option<PathBuf>,
}

impl ConfigSources {
    pub fn with_env(mut self) -> Self {
        if self.data_root.is_none() {
            self.data_root = std::env::var_os(ENV_DATA_ROOT).map(PathBuf::from);
        }
        if self.weight_cache.is_none() {
            self.weight_cache = std::env::var_os(ENV_WEIGHT_CACHE).map(PathBuf::from);
        }
        self
    }
}

fn to_table(config: &RunConfig) -> Result<toml::Table> {
    toml::Table::try_from(config).map_err(|e| Error::config(e.to_string()))
}

fn from_table(table: toml::Table, context: &str) -> Result<RunConfig> {
    table.try_into().map_err(|e: toml::de::Error| Error::config(format!("{context}: {}", e.message())))
}

/// Resolves and validates the configuration; unknown keys fail with their name.
pub fn resolve(sources: &ConfigSources) -> Result<RunConfig> {
    let base = sources.base.as_deref().unwrap_or("default");
    let tree = match RunConfig::preset(base) {
        Some(preset) => to_table(&preset)?,
        None => {
            let path = Path::new(base);
            if !path.is_file() {
                return Err(Error::config(format!("`{base}` is neither a preset nor a config file")));
            }
            let mut tree = to_table(&RunConfig::full())?;
            let text = std::fs::read_to_string(path)?;
            let file: toml::Table =
                toml::from_str(&text).map_err(|e| Error::config(format!("{}: {}", path.display(), e.message())))?;
            merge(&mut tree, file);
            from_table(tree.clone(), &path.display().to_string())?;
            tree
        }
    };
    apply(tree, sources)
}

/// Applies environment paths and overrides on top of an existing configuration.
pub fn resolve_onto(base: RunConfig, sources: &ConfigSources) -> Result<RunConfig> {
    apply(to_table(&base)?, sources)
}

fn apply(mut tree: toml::Table, sources: &ConfigSources) -> Result<RunConfig> {
    if let Some(root) = &sources.data_root {
        set_path(&mut tree, "data.root", toml::Value::String(root.display().to_string()))?;
    }
    if let Some(cache) = &sources.weight_cache {
        set_path(&mut tree, "paths.weight_cache", toml::Value::String(cache.display().to_string()))?;
    }
    for item in &sources.overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override `{item}` is not of the form key=value")))?;
        let key = key.trim();
        let mut candidate = tree.clone();
        set_path(&mut candidate, key, parse_value(raw.trim()))?;
        from_table(candidate.clone(), &format!("override `{key}`"))?;
        tree = candidate;
    }
    let config = from_table(tree, "config")?;
    config.validate()?;
    Ok(config)
}
