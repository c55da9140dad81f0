//! Anomaly maps from guide/student feature discrepancies.
//!
//! Each critical layer contributes a pixel-loss map `P^l` weighted by the
//! harmonic mean of a distance term (`alpha_mse`) and a direction term
//! (`alpha_cos`). Weighted maps are resized to the image grid, fused by a
//! [`CombinationMode`], and smoothed with a Gaussian.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbones::FeaturePyramid;
use crate::datasets::ImageSample;
use crate::error::{Error, Result};
use crate::imgops;
use crate::model::GTrans;

/// Below this the harmonic-mean denominator is treated as zero.
pub const WEIGHT_EPS: f64 = 1e-12;
pub const LAMBDA_MIN: f64 = 1e-6;
pub const LAMBDA_MAX: f64 = 1e6;

/// Flattened `(C, H, W)` values of a single-image layer in f64.
struct LayerValues {
    data: Vec<f64>,
    channels: usize,
    height: usize,
    width: usize,
}

fn layer_values(t: &candle_core::Tensor) -> Result<LayerValues> {
    let dims = t.dims().to_vec();
    let (c, h, w) = match dims.as_slice() {
        [c, h, w] => (*c, *h, *w),
        [1, c, h, w] => (*c, *h, *w),
        _ => return Err(Error::shape(format!("expected a (C, H, W) layer, got {dims:?}"))),
    };
    let data = t.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
    Ok(LayerValues { data, channels: c, height: h, width: w })
}

fn layer_pair(guide: &candle_core::Tensor, mapped: &candle_core::Tensor) -> Result<(LayerValues, LayerValues)> {
    let g = layer_values(guide)?;
    let m = layer_values(mapped)?;
    if (g.channels, g.height, g.width) != (m.channels, m.height, m.width) {
        return Err(Error::shape(format!(
            "layer shapes differ: {:?} vs {:?}",
            (g.channels, g.height, g.width),
            (m.channels, m.height, m.width)
        )));
    }
    Ok((g, m))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerLossMap {
    pub values: Array2<f64>,
    /// Backbone stage of the layer.
    pub layer: usize,
}

/// `P(i,j) = ½·Σ_c (G − M)² / (h·w)`.
pub fn layer_loss_map(guide: &candle_core::Tensor, mapped: &candle_core::Tensor, layer: usize) -> Result<LayerLossMap> {
    let (g, m) = layer_pair(guide, mapped)?;
    let plane = g.height * g.width;
    let norm = 1.0 / plane as f64;
    let mut values = Array2::<f64>::zeros((g.height, g.width));
    for c in 0..g.channels {
        let base = c * plane;
        for (p, v) in values.iter_mut().enumerate() {
            let d = g.data[base + p] - m.data[base + p];
            *v += 0.5 * d * d;
        }
    }
    values.mapv_inplace(|v| v * norm);
    Ok(LayerLossMap { values, layer })
}

/// Mean squared difference over every element of the layer.
pub fn alpha_mse(guide: &candle_core::Tensor, mapped: &candle_core::Tensor) -> Result<f64> {
    let (g, m) = layer_pair(guide, mapped)?;
    let sum: f64 = g.data.iter().zip(&m.data).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / g.data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineDissimilarity {
    pub value: f64,
    /// Both vectors were zero; `value` is then defined as 0.
    pub degenerate: bool,
}

/// `1 − cos(vec(G), vec(M))`, in `[0, 2]`.
pub fn alpha_cos(guide: &candle_core::Tensor, mapped: &candle_core::Tensor) -> Result<CosineDissimilarity> {
    let (g, m) = layer_pair(guide, mapped)?;
    let (mut dot, mut ng, mut nm) = (0.0, 0.0, 0.0);
    for (a, b) in g.data.iter().zip(&m.data) {
        dot += a * b;
        ng += a * a;
        nm += b * b;
    }
    if ng == 0.0 && nm == 0.0 {
        return Ok(CosineDissimilarity { value: 0.0, degenerate: true });
    }
    let denom = ng.sqrt() * nm.sqrt();
    let cos = if denom > 0.0 { (dot / denom).clamp(-1.0, 1.0) } else { 0.0 };
    Ok(CosineDissimilarity { value: 1.0 - cos, degenerate: false })
}

/// `λ·a_cos·a_mse / (a_mse + λ·a_cos)`, zero when the denominator vanishes.
pub fn layer_weight(a_mse: f64, a_cos: f64, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidInput(format!("lambda must be positive, got {lambda}")));
    }
    if a_mse < 0.0 || a_cos < 0.0 {
        return Err(Error::InvalidInput(format!("negative dissimilarities: mse {a_mse}, cos {a_cos}")));
    }
    let denom = a_mse + lambda * a_cos;
    if denom < WEIGHT_EPS {
        return Ok(0.0);
    }
    Ok(lambda * a_cos * a_mse / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CombinationMode {
    /// Layer 3 alone.
    P1,
    /// `1 ⊙ 3`
    P2,
    /// `2 ⊙ 3`
    P3,
    /// `1 + 2 + 3`
    P4,
    /// `1 ⊙ 2 ⊙ 3`
    P5,
    /// `1 ⊙ 3 + 2 ⊙ 3`
    P6,
    /// Plain sum over every configured layer.
    SumAll,
}

impl CombinationMode {
    pub const TABLE: [CombinationMode; 6] = [Self::P1, Self::P2, Self::P3, Self::P4, Self::P5, Self::P6];

    pub fn label(self) -> &'static str {
        match self {
            Self::P1 => "P1: 3",
            Self::P2 => "P2: 1*3",
            Self::P3 => "P3: 2*3",
            Self::P4 => "P4: 1+2+3",
            Self::P5 => "P5: 1*2*3",
            Self::P6 => "P6: 1*3+2*3",
            Self::SumAll => "sum",
        }
    }

    /// Backbone stages the formula reads.
    pub fn stages(self) -> &'static [usize] {
        match self {
            Self::P1 => &[3],
            Self::P2 => &[1, 3],
            Self::P3 => &[2, 3],
            Self::P4 | Self::P5 | Self::P6 => &[1, 2, 3],
            Self::SumAll => &[],
        }
    }

    pub fn check(self, stages: &[usize]) -> Result<()> {
        match self.stages().iter().find(|s| !stages.contains(s)) {
            Some(missing) => Err(Error::config(format!(
                "combination mode {self:?} needs layer {missing}, configured layers are {stages:?}"
            ))),
            None => Ok(()),
        }
    }
}

/// Per-layer coefficient applied to `R(P^l)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Fixed 0.5.
    Constant,
    Mse,
    Cos,
    Harmonic,
}

impl Weighting {
    pub const TABLE: [Weighting; 4] = [Self::Constant, Self::Mse, Self::Cos, Self::Harmonic];

    pub fn label(self) -> &'static str {
        match self {
            Self::Constant => "0.5",
            Self::Mse => "alpha_mse",
            Self::Cos => "alpha_cos",
            Self::Harmonic => "alpha",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSource {
    /// Per-layer values calibrated on validation normals and stored in the checkpoint.
    Calibrated,
    /// λ = 1 for every layer.
    Unit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreConfig {
    pub mode: CombinationMode,
    pub sigma: f64,
    pub lambda_source: LambdaSource,
    pub weighting: Weighting,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self { mode: CombinationMode::P6, sigma: 4.0, lambda_source: LambdaSource::Calibrated, weighting: Weighting::Harmonic }
    }
}

impl ScoreConfig {
    pub fn validate(&self, stages: &[usize]) -> Result<()> {
        if !(self.sigma >= 0.0) {
            return Err(Error::config("score.sigma must be non-negative"));
        }
        self.mode.check(stages)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub alpha_mse: f64,
    pub alpha_cos: f64,
    pub lambda: f64,
    pub alpha: f64,
}

impl LayerWeights {
    pub fn compute(guide: &candle_core::Tensor, mapped: &candle_core::Tensor, lambda: f64) -> Result<Self> {
        let alpha_mse = alpha_mse(guide, mapped)?;
        let alpha_cos = alpha_cos(guide, mapped)?.value;
        let alpha = layer_weight(alpha_mse, alpha_cos, lambda)?;
        Ok(Self { alpha_mse, alpha_cos, lambda, alpha })
    }

    pub fn coefficient(&self, weighting: Weighting) -> f64 {
        match weighting {
            Weighting::Constant => 0.5,
            Weighting::Mse => self.alpha_mse,
            Weighting::Cos => self.alpha_cos,
            Weighting::Harmonic => self.alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub values: Array2<f32>,
    pub image_score: f32,
    pub mode: CombinationMode,
    pub sigma: f64,
}

/// Maximum over all pixels.
pub fn image_score(map: &Array2<f32>) -> f32 {
    map.iter().copied().fold(0.0f32, f32::max)
}

fn fuse(mode: CombinationMode, stages: &[usize], weighted: &[Array2<f64>]) -> Result<Array2<f64>> {
    mode.check(stages)?;
    let at = |stage: usize| -> &Array2<f64> {
        let k = stages.iter().position(|&s| s == stage).expect("checked");
        &weighted[k]
    };
    Ok(match mode {
        CombinationMode::P1 => at(3).clone(),
        CombinationMode::P2 => at(1) * at(3),
        CombinationMode::P3 => at(2) * at(3),
        CombinationMode::P4 => at(1) + at(2) + at(3),
        CombinationMode::P5 => at(1) * at(2) * at(3),
        CombinationMode::P6 => at(1) * at(3) + at(2) * at(3),
        CombinationMode::SumAll => {
            let mut acc = Array2::zeros(weighted[0].dim());
            for w in weighted {
                acc += w;
            }
            acc
        }
    })
}

/// Weighted, resized per-layer maps `α^l·R(P^l)` for one image.
pub fn weighted_layer_maps(
    guide: &FeaturePyramid,
    mapped: &FeaturePyramid,
    lambdas: &[f64],
    weighting: Weighting,
    out_size: (usize, usize),
) -> Result<Vec<Array2<f64>>> {
    guide.ensure_aligned(mapped)?;
    if lambdas.len() != guide.len() {
        return Err(Error::config(format!("{} lambdas for {} layers", lambdas.len(), guide.len())));
    }
    let mut maps = Vec::with_capacity(guide.len());
    for (k, (g, m)) in guide.layers.iter().zip(&mapped.layers).enumerate() {
        let loss = layer_loss_map(g, m, guide.stages[k])?;
        let weights = LayerWeights::compute(g, m, lambdas[k])?;
        let coefficient = weights.coefficient(weighting);
        let resized = imgops::resize_bilinear(loss.values.mapv(|v| v as f32).view(), out_size.0, out_size.1);
        maps.push(resized.mapv(|v| coefficient * f64::from(v)));
    }
    Ok(maps)
}

/// Anomaly map of a single image (pyramids with batch size one).
pub fn anomaly_map(
    guide: &FeaturePyramid,
    mapped: &FeaturePyramid,
    lambdas: &[f64],
    config: &ScoreConfig,
    out_size: (usize, usize),
) -> Result<AnomalyMap> {
    config.validate(&guide.stages)?;
    let weighted = weighted_layer_maps(guide, mapped, lambdas, config.weighting, out_size)?;
    let fused = fuse(config.mode, &guide.stages, &weighted)?;
    let values = imgops::gaussian_blur(fused.mapv(|v| v as f32).view(), config.sigma);
    let image_score = image_score(&values);
    Ok(AnomalyMap { values, image_score, mode: config.mode, sigma: config.sigma })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaCalibration {
    pub lambdas: Vec<f64>,
    pub mean_alpha_mse: Vec<f64>,
    pub mean_alpha_cos: Vec<f64>,
    /// Layers whose ratio fell outside `[LAMBDA_MIN, LAMBDA_MAX]` (including a zero cosine mean).
    pub clamped: Vec<bool>,
}

/// `λ_l = mean(α_mse^l) / mean(α_cos^l)`, clamped.
pub fn lambdas_from_stats(mse: &[Vec<f64>], cos: &[Vec<f64>]) -> Result<LambdaCalibration> {
    if mse.is_empty() || mse.len() != cos.len() {
        return Err(Error::InvalidData("lambda calibration needs at least one validation image".into()));
    }
    let layers = mse[0].len();
    let mean = |rows: &[Vec<f64>], l: usize| rows.iter().map(|r| r[l]).sum::<f64>() / rows.len() as f64;
    let mut out = LambdaCalibration { lambdas: vec![], mean_alpha_mse: vec![], mean_alpha_cos: vec![], clamped: vec![] };
    for l in 0..layers {
        let m = mean(mse, l);
        let c = mean(cos, l);
        let ratio = if c > 0.0 { m / c } else { f64::INFINITY };
        let lambda = ratio.clamp(LAMBDA_MIN, LAMBDA_MAX);
        if lambda != ratio {
            log::warn!("lambda for layer {l} clamped (mean alpha_mse {m}, mean alpha_cos {c})");
        }
        out.clamped.push(lambda != ratio);
        out.lambdas.push(lambda);
        out.mean_alpha_mse.push(m);
        out.mean_alpha_cos.push(c);
    }
    Ok(out)
}

/// Forward pass in inference mode over `samples`, one pyramid pair per image.
pub fn forward_items(model: &GTrans, samples: &[ImageSample], batch_size: usize) -> Result<Vec<(FeaturePyramid, FeaturePyramid)>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&ImageSample> = chunk.iter().collect();
        let fwd = model.forward(&model.batch_tensor(&refs)?, false)?;
        for i in 0..chunk.len() {
            out.push((fwd.guide.item(i)?, fwd.mapped().item(i)?));
        }
    }
    Ok(out)
}

pub fn calibrate_lambda(model: &GTrans, val: &[ImageSample], batch_size: usize) -> Result<LambdaCalibration> {
    if val.is_empty() {
        return Err(Error::InvalidData("lambda calibration needs a non-empty validation set".into()));
    }
    let mut mse = Vec::with_capacity(val.len());
    let mut cos = Vec::with_capacity(val.len());
    for (g, m) in forward_items(model, val, batch_size)? {
        let mut row_m = Vec::with_capacity(g.len());
        let mut row_c = Vec::with_capacity(g.len());
        for (a, b) in g.layers.iter().zip(&m.layers) {
            row_m.push(alpha_mse(a, b)?);
            row_c.push(alpha_cos(a, b)?.value);
        }
        mse.push(row_m);
        cos.push(row_c);
    }
    lambdas_from_stats(&mse, &cos)
}

/// Anomaly maps for every sample, at each sample's pixel grid.
pub fn score_samples(
    model: &GTrans,
    samples: &[ImageSample],
    lambdas: &[f64],
    config: &ScoreConfig,
    batch_size: usize,
) -> Result<Vec<AnomalyMap>> {
    let pairs = forward_items(model, samples, batch_size)?;
    pairs
        .iter()
        .zip(samples)
        .map(|((g, m), s)| anomaly_map(g, m, lambdas, config, s.size()))
        .collect()
}
