//! End-to-end commands behind the CLI: train, calibrate, evaluate, ablate, and
//! synthetic-data generation. Each writes its resolved config next to its outputs.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::{DataSource, RunConfig};
use crate::datasets::{self, DatasetSplit, Label};
use crate::error::{Error, Result};
use crate::export;
use crate::mapper::TokenSource;
use crate::metrics::{self, CategoryReport, EvaluationReport};
use crate::model::GTrans;
use crate::scoring::{self, CombinationMode, LambdaCalibration, LambdaSource, ScoreConfig, Weighting};
use crate::training::{self, TrainLog};

pub const CONFIG_SNAPSHOT: &str = "config.toml";

pub fn load_data(config: &RunConfig) -> Result<DatasetSplit> {
    match config.data.source {
        DataSource::Synthetic => datasets::generate_synthetic_dataset(&config.data.synthetic, &config.data.preprocess),
        DataSource::Mvtec => {
            let root = config
                .data
                .root
                .as_ref()
                .ok_or_else(|| Error::config("data.root (or GTRANS_DATA_ROOT) is required for mvtec data"))?;
            datasets::load_mvtec_category(
                root,
                &config.data.category,
                &config.data.preprocess,
                config.data.train_fraction,
                config.seed,
            )
        }
    }
}

pub fn write_snapshot(config: &RunConfig, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(CONFIG_SNAPSHOT);
    std::fs::write(&path, config.to_toml()?)?;
    Ok(path)
}

pub fn checkpoint_path(dir: &Path, category: &str) -> PathBuf {
    dir.join(format!("{category}.ckpt.safetensors"))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub train_log: PathBuf,
    pub lambdas: PathBuf,
    pub config: PathBuf,
    pub log: TrainLog,
    pub calibration: LambdaCalibration,
}

/// Trains, calibrates λ on the validation normals, and writes all artifacts to `out`.
pub fn train_model(config: &RunConfig, data: &DatasetSplit) -> Result<(GTrans, training::TrainOutcome, LambdaCalibration)> {
    let model = GTrans::new(&config.model(), config.seed, config.paths.weight_cache.as_deref())?;
    let before = model.guide_checksum()?;
    let outcome = training::train(&model, data, &config.training, config.seed, |r| {
        log::info!("epoch {:>4}  train {:.6}  val {:.6}  lr {:.3e}", r.epoch, r.train_loss, r.val_loss, r.lr);
    })?;
    debug_assert_eq!(before, model.guide_checksum()?);
    let calibration = scoring::calibrate_lambda(&model, &data.val, config.training.batch_size)?;
    Ok((model, outcome, calibration))
}

pub fn cmd_train(config: &RunConfig, out: &Path) -> Result<TrainArtifacts> {
    config.validate()?;
    let snapshot = write_snapshot(config, out)?;
    let data = load_data(config)?;
    let category = &config.data.category;
    let (model, outcome, calibration) = train_model(config, &data)?;
    let train_log = out.join(format!("{category}_trainlog.csv"));
    outcome.log.write_csv(std::fs::File::create(&train_log)?)?;
    let lambdas = out.join(format!("{category}_lambda.json"));
    write_json(&calibration, &lambdas)?;
    let ckpt = checkpoint_path(out, category);
    let meta = CheckpointMeta {
        model: config.model(),
        run_config: config.to_toml()?,
        category: category.clone(),
        seed: config.seed,
        epoch: outcome.best_epoch,
        step: outcome.steps,
        best_val_loss: outcome.best_val_loss,
        lambdas: Some(calibration.lambdas.clone()),
        guide_checksum: model.guide_checksum()?,
    };
    checkpoint::save(&ckpt, &model, &meta)?;
    Ok(TrainArtifacts { checkpoint: ckpt, train_log, lambdas, config: snapshot, log: outcome.log, calibration })
}

/// Config of a checkpoint's run with `overrides` applied; model-shaping keys must not change.
pub fn checkpoint_config(meta: &CheckpointMeta, sources: &crate::config::ConfigSources) -> Result<RunConfig> {
    let base = RunConfig::from_toml(&meta.run_config)
        .map_err(|e| Error::VersionMismatch { found: format!("run config ({e})"), expected: checkpoint::VERSION.into() })?;
    let config = crate::config::resolve_onto(base, sources)?;
    if config.model() != meta.model {
        return Err(Error::config("overrides may not change the model architecture of a checkpoint"));
    }
    Ok(config)
}

pub fn cmd_calibrate_lambda(ckpt: &Path, sources: &crate::config::ConfigSources) -> Result<LambdaCalibration> {
    let (model, mut meta) = checkpoint::load(ckpt)?;
    let config = checkpoint_config(&meta, sources)?;
    let data = load_data(&config)?;
    let calibration = scoring::calibrate_lambda(&model, &data.val, config.training.batch_size)?;
    meta.lambdas = Some(calibration.lambdas.clone());
    checkpoint::save(ckpt, &model, &meta)?;
    let dir = ckpt.parent().unwrap_or(Path::new("."));
    write_json(&calibration, &dir.join(format!("{}_lambda.json", meta.category)))?;
    Ok(calibration)
}

pub fn resolve_lambdas(score: &ScoreConfig, stored: Option<&[f64]>, layers: usize) -> Result<Vec<f64>> {
    match score.lambda_source {
        LambdaSource::Unit => Ok(vec![1.0; layers]),
        LambdaSource::Calibrated => {
            let l = stored.ok_or_else(|| Error::config("checkpoint has no calibrated lambdas; run calibrate-lambda"))?;
            if l.len() != layers {
                return Err(Error::Checkpoint(format!("{} lambdas stored for {layers} layers", l.len())));
            }
            Ok(l.to_vec())
        }
    }
}

/// Scores the test split and computes the category report.
pub fn score_and_report(
    model: &GTrans,
    config: &RunConfig,
    data: &DatasetSplit,
    lambdas: &[f64],
) -> Result<(CategoryReport, Vec<scoring::AnomalyMap>)> {
    let maps = scoring::score_samples(model, &data.test, lambdas, &config.score, config.training.batch_size)?;
    let report = metrics::evaluate(&config.data.category, &data.test, &maps, config.metrics.fpr_cap)?;
    Ok((report, maps))
}

#[derive(Debug, Clone)]
pub struct EvaluateArtifacts {
    pub report: EvaluationReport,
    pub json: PathBuf,
    pub csv: PathBuf,
    pub maps: Vec<PathBuf>,
}

pub fn cmd_evaluate(ckpt: &Path, sources: &crate::config::ConfigSources, out: &Path, emit_maps: bool) -> Result<EvaluateArtifacts> {
    let (model, meta) = checkpoint::load(ckpt)?;
    let config = checkpoint_config(&meta, sources)?;
    write_snapshot(&config, out)?;
    let data = load_data(&config)?;
    let lambdas = resolve_lambdas(&config.score, meta.lambdas.as_deref(), config.backbone.critical_layers.len())?;
    let (row, maps) = score_and_report(&model, &config, &data, &lambdas)?;
    let category = config.data.category.clone();
    let report = EvaluationReport::new(vec![row], config.metrics.fpr_cap);
    let json = out.join(format!("{category}_report.json"));
    let csv = out.join(format!("{category}_report.csv"));
    report.write_json(&json)?;
    report.write_csv(&csv)?;
    let mut written = Vec::new();
    if emit_maps {
        let dir = out.join("maps");
        std::fs::create_dir_all(&dir)?;
        // One scale for every heatmap so intensities compare across images.
        let hi = maps.iter().map(|m| m.image_score).fold(0.0f32, f32::max);
        for (i, (map, sample)) in maps.iter().zip(&data.test).enumerate() {
            let label = match sample.label {
                Label::Normal => "normal",
                Label::Anomalous => "anomalous",
            };
            let stem = dir.join(format!("{category}_{i:03}_{label}"));
            let raw = stem.with_extension("raw");
            export::write_raw(&raw, map.values.view())?;
            let heat = PathBuf::from(format!("{}_heatmap.png", stem.display()));
            export::heatmap(map.values.view(), 0.0, hi).save(&heat)?;
            let rgb = datasets::denormalize(sample.pixels.view(), &config.data.preprocess);
            let over = PathBuf::from(format!("{}_overlay.png", stem.display()));
            export::overlay(map.values.view(), rgb.view(), 0.0, hi)?.save(&over)?;
            written.extend([raw, heat, over]);
        }
    }
    Ok(EvaluateArtifacts { report, json, csv, maps: written })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Layers,
    TfmDepth,
    Decoder,
    Weights,
    Modes,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layers" => Ok(Self::Layers),
            "tfm_depth" => Ok(Self::TfmDepth),
            "decoder" => Ok(Self::Decoder),
            "weights" => Ok(Self::Weights),
            "modes" => Ok(Self::Modes),
            other => Err(Error::config(format!(
                "unknown ablation axis `{other}` (expected layers, tfm_depth, decoder, weights, modes)"
            ))),
        }
    }
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Layers => "layers",
            Self::TfmDepth => "tfm_depth",
            Self::Decoder => "decoder",
            Self::Weights => "weights",
            Self::Modes => "modes",
        }
    }

    /// Whether each variant needs its own trained model.
    pub fn retrains(self) -> bool {
        matches!(self, Self::Layers | Self::TfmDepth | Self::Decoder)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub axis: String,
    pub variant: String,
    pub image_auroc: f64,
    pub pixel_auroc: f64,
    pub aupro: f64,
}

fn decoder_variant(config: &RunConfig, with_decoder: bool) -> RunConfig {
    let mut c = config.clone();
    c.tfm.use_decoder = with_decoder;
    c.mapper.token_source = if with_decoder { TokenSource::Decoder } else { TokenSource::Encoder };
    c
}

/// Model variants of a retraining axis, labelled as in the comparison tables.
pub fn ablation_variants(config: &RunConfig, axis: AblationAxis) -> Vec<(String, RunConfig)> {
    match axis {
        AblationAxis::Layers => [vec![1, 2, 3, 4], vec![1, 2, 3], vec![2, 3, 4], vec![3, 4]]
            .into_iter()
            .map(|layers| {
                let mut c = config.clone();
                let label = format!("Layer {}", layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("+"));
                c.backbone.critical_layers = layers;
                c.score.mode = CombinationMode::SumAll;
                (label, c)
            })
            .collect(),
        AblationAxis::TfmDepth => [false, true]
            .into_iter()
            .flat_map(|dec| {
                (1..=3).map(move |s| {
                    let mut c = decoder_variant(config, dec);
                    c.tfm.blocks = s;
                    let kind = if dec { "added decoder" } else { "pure encoder" };
                    (format!("{kind} S={s}"), c)
                })
            })
            .collect(),
        AblationAxis::Decoder => [false, true]
            .into_iter()
            .map(|dec| {
                let kind = if dec { "added decoder" } else { "pure encoder" };
                (format!("{kind} S={}", config.tfm.blocks), decoder_variant(config, dec))
            })
            .collect(),
        AblationAxis::Weights | AblationAxis::Modes => vec![],
    }
}

fn row(axis: AblationAxis, variant: String, r: &CategoryReport) -> AblationRow {
    AblationRow { axis: axis.name().into(), variant, image_auroc: r.image_auroc, pixel_auroc: r.pixel_auroc, aupro: r.aupro }
}

/// Sweeps `axis`. Scoring axes reuse `ckpt` when given, otherwise train one model first.
pub fn cmd_ablate(config: &RunConfig, axis: AblationAxis, ckpt: Option<&Path>, out: &Path) -> Result<(Vec<AblationRow>, PathBuf)> {
    config.validate()?;
    write_snapshot(config, out)?;
    let mut rows = Vec::new();
    if axis.retrains() {
        let data = load_data(config)?;
        for (label, variant) in ablation_variants(config, axis) {
            variant.validate()?;
            log::info!("ablation {}: training `{label}`", axis.name());
            let (model, _, cal) = train_model(&variant, &data)?;
            let lambdas = resolve_lambdas(&variant.score, Some(&cal.lambdas), variant.backbone.critical_layers.len())?;
            let (report, _) = score_and_report(&model, &variant, &data, &lambdas)?;
            rows.push(row(axis, label, &report));
        }
    } else {
        let (model, config, stored) = match ckpt {
            Some(path) => {
                let (model, meta) = checkpoint::load(path)?;
                let c = checkpoint_config(&meta, &Default::default())?;
                (model, c, meta.lambdas)
            }
            None => {
                let data = load_data(config)?;
                let (model, _, cal) = train_model(config, &data)?;
                (model, config.clone(), Some(cal.lambdas))
            }
        };
        let data = load_data(&config)?;
        let lambdas = resolve_lambdas(&config.score, stored.as_deref(), config.backbone.critical_layers.len())?;
        // Forward once; every variant only re-fuses the same pyramids.
        let pairs = scoring::forward_items(&model, &data.test, config.training.batch_size)?;
        let variants: Vec<(String, ScoreConfig)> = match axis {
            AblationAxis::Modes => CombinationMode::TABLE
                .iter()
                .map(|&mode| (mode.label().to_string(), ScoreConfig { mode, ..config.score.clone() }))
                .collect(),
            _ => Weighting::TABLE
                .iter()
                .map(|&weighting| (weighting.label().to_string(), ScoreConfig { weighting, ..config.score.clone() }))
                .collect(),
        };
        for (label, score) in variants {
            let maps = pairs
                .iter()
                .zip(&data.test)
                .map(|((g, m), s)| scoring::anomaly_map(g, m, &lambdas, &score, s.size()))
                .collect::<Result<Vec<_>>>()?;
            let report = metrics::evaluate(&config.data.category, &data.test, &maps, config.metrics.fpr_cap)?;
            rows.push(row(axis, label, &report));
        }
    }
    let path = out.join(format!("{}_ablation_{}.csv", config.data.category, axis.name()));
    let mut w = csv::Writer::from_path(&path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok((rows, path))
}

/// Writes the synthetic dataset as an MVTec-style tree under `root/<category>`.
pub fn cmd_make_synthetic(spec: &datasets::SyntheticSpec, root: &Path, category: &str) -> Result<PathBuf> {
    datasets::write_synthetic_layout(spec, root, category)
}
