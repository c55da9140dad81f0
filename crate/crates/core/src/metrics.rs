//! Detection and localization metrics.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::datasets::{ImageSample, Label};
use crate::error::{Error, Result};
use crate::scoring::AnomalyMap;

pub const DEFAULT_FPR_CAP: f64 = 0.3;

/// Area under the ROC curve via the Mann-Whitney statistic with mid-ranks for ties.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidInput(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let mut pos_rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their mean.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count();
        pos_rank_sum += mid * pos_in_group as f64;
        i = j + 1;
    }
    let u = pos_rank_sum - (n_pos as f64) * (n_pos as f64 + 1.0) / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// 8-connected components of the nonzero pixels; returns labels (0 = background) and the count.
pub fn connected_components(mask: ArrayView2<u8>) -> (Array2<u32>, usize) {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut count = 0u32;
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] == 0 || labels[[y, x]] != 0 {
                continue;
            }
            count += 1;
            labels[[y, x]] = count;
            stack.push((y, x));
            while let Some((cy, cx)) = stack.pop() {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let ny = cy as i64 + dy;
                        let nx = cx as i64 + dx;
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask[[ny, nx]] != 0 && labels[[ny, nx]] == 0 {
                            labels[[ny, nx]] = count;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
        }
    }
    (labels, count as usize)
}

/// The per-region-overlap curve as `(fpr, pro)` points, from `(0, 0)` to `(1, 1)`,
/// with a point after every distinct threshold.
pub fn pro_curve(maps: &[ArrayView2<f32>], masks: &[ArrayView2<u8>]) -> Result<Vec<(f64, f64)>> {
    if maps.len() != masks.len() || maps.is_empty() {
        return Err(Error::InvalidInput(format!("{} maps for {} masks", maps.len(), masks.len())));
    }
    // Each pixel carries its FPR increment and PRO increment.
    let mut entries: Vec<(f32, u32)> = Vec::new();
    let mut region_sizes: Vec<usize> = vec![0];
    let mut n_normal = 0usize;
    for (map, mask) in maps.iter().zip(masks) {
        if map.dim() != mask.dim() {
            return Err(Error::shape(format!("map {:?} vs mask {:?}", map.dim(), mask.dim())));
        }
        let (labels, count) = connected_components(*mask);
        let offset = region_sizes.len() as u32 - 1;
        region_sizes.extend(std::iter::repeat(0).take(count));
        for (&score, &label) in map.iter().zip(labels.iter()) {
            if score.is_nan() {
                return Err(Error::InvalidInput("NaN in anomaly map".into()));
            }
            if label == 0 {
                n_normal += 1;
                entries.push((score, 0));
            } else {
                let region = label + offset;
                region_sizes[region as usize] += 1;
                entries.push((score, region));
            }
        }
    }
    let n_regions = region_sizes.len() - 1;
    if n_regions == 0 {
        return Err(Error::UndefinedMetric("AUPRO needs at least one anomalous pixel".into()));
    }
    if n_normal == 0 {
        return Err(Error::UndefinedMetric("AUPRO needs at least one normal pixel".into()));
    }
    entries.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    let mut curve = vec![(0.0, 0.0)];
    let (mut fp, mut pro) = (0usize, 0.0f64);
    let mut i = 0;
    while i < entries.len() {
        let t = entries[i].0;
        while i < entries.len() && entries[i].0 == t {
            match entries[i].1 {
                0 => fp += 1,
                r => pro += 1.0 / region_sizes[r as usize] as f64,
            }
            i += 1;
        }
        curve.push((fp as f64 / n_normal as f64, pro / n_regions as f64));
    }
    Ok(curve)
}

/// Trapezoidal area under `curve` for `x ∈ [0, cap]`, interpolating at the cap.
pub fn area_to_cap(curve: &[(f64, f64)], cap: f64) -> f64 {
    let mut area = 0.0;
    for pair in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (pair[0], pair[1]);
        if x0 >= cap {
            break;
        }
        if x1 <= cap {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let yc = y0 + (y1 - y0) * (cap - x0) / (x1 - x0);
            area += (cap - x0) * (y0 + yc) / 2.0;
            break;
        }
    }
    area
}

/// Normalized area under the PRO curve up to `fpr_cap`.
pub fn aupro(maps: &[ArrayView2<f32>], masks: &[ArrayView2<u8>], fpr_cap: f64) -> Result<f64> {
    if !(fpr_cap > 0.0 && fpr_cap <= 1.0) {
        return Err(Error::config(format!("fpr_cap must be in (0, 1], got {fpr_cap}")));
    }
    let curve = pro_curve(maps, masks)?;
    Ok(area_to_cap(&curve, fpr_cap) / fpr_cap)
}

/// Pixel-level AUROC over every pixel of every map.
pub fn pixel_auroc(maps: &[ArrayView2<f32>], masks: &[ArrayView2<u8>]) -> Result<f64> {
    if maps.len() != masks.len() {
        return Err(Error::InvalidInput(format!("{} maps for {} masks", maps.len(), masks.len())));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (map, mask) in maps.iter().zip(masks) {
        if map.dim() != mask.dim() {
            return Err(Error::shape(format!("map {:?} vs mask {:?}", map.dim(), mask.dim())));
        }
        scores.extend(map.iter().map(|&v| f64::from(v)));
        labels.extend(mask.iter().map(|&m| m != 0));
    }
    auroc(&scores, &labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: String,
    pub image_auroc: f64,
    pub pixel_auroc: f64,
    pub aupro: f64,
    pub n_images: usize,
    pub n_anomalous: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub image_auroc: f64,
    pub pixel_auroc: f64,
    pub aupro: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub fpr_cap: f64,
    pub categories: Vec<CategoryReport>,
    /// Arithmetic means over `categories`; absent when there are none.
    pub mean: Option<MeanMetrics>,
}

impl EvaluationReport {
    pub fn new(categories: Vec<CategoryReport>, fpr_cap: f64) -> Self {
        let mean = (!categories.is_empty()).then(|| {
            let n = categories.len() as f64;
            MeanMetrics {
                image_auroc: categories.iter().map(|c| c.image_auroc).sum::<f64>() / n,
                pixel_auroc: categories.iter().map(|c| c.pixel_auroc).sum::<f64>() / n,
                aupro: categories.iter().map(|c| c.aupro).sum::<f64>() / n,
            }
        });
        Self { fpr_cap, categories, mean }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(std::fs::File::open(path)?)?)
    }

    /// One row per category; with more than one category a trailing `mean` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.categories {
            w.serialize(row)?;
        }
        if let (Some(mean), true) = (&self.mean, self.categories.len() > 1) {
            w.serialize(CategoryReport {
                category: "mean".into(),
                image_auroc: mean.image_auroc,
                pixel_auroc: mean.pixel_auroc,
                aupro: mean.aupro,
                n_images: self.categories.iter().map(|c| c.n_images).sum(),
                n_anomalous: self.categories.iter().map(|c| c.n_anomalous).sum(),
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Scores one category's test split from its anomaly maps.
pub fn evaluate(category: &str, samples: &[ImageSample], maps: &[AnomalyMap], fpr_cap: f64) -> Result<CategoryReport> {
    if samples.is_empty() {
        return Err(Error::InvalidData(format!("empty test set for `{category}`")));
    }
    if samples.len() != maps.len() {
        return Err(Error::InvalidInput(format!("{} samples for {} maps", samples.len(), maps.len())));
    }
    let image_scores: Vec<f64> = maps.iter().map(|m| f64::from(m.image_score)).collect();
    let image_labels: Vec<bool> = samples.iter().map(|s| s.label == Label::Anomalous).collect();
    let masks: Vec<Array2<u8>> = samples.iter().map(|s| s.mask_or_zeros()).collect();
    let map_views: Vec<_> = maps.iter().map(|m| m.values.view()).collect();
    let mask_views: Vec<_> = masks.iter().map(|m| m.view()).collect();
    Ok(CategoryReport {
        category: category.to_string(),
        image_auroc: auroc(&image_scores, &image_labels)?,
        pixel_auroc: pixel_auroc(&map_views, &mask_views)?,
        aupro: aupro(&map_views, &mask_views, fpr_cap)?,
        n_images: samples.len(),
        n_anomalous: image_labels.iter().filter(|&&l| l).count(),
    })
}
