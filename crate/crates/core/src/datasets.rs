//! Dataset ingestion, deterministic preprocessing, and the synthetic texture set.

use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgops;

/// ImageNet channel statistics, used by the pretrained guide backbones.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub resize_edge: usize,
    pub crop_size: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { resize_edge: 256, crop_size: 224, mean: IMAGENET_MEAN, std: IMAGENET_STD }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop_size == 0 || self.crop_size > self.resize_edge {
            return Err(Error::config(format!(
                "preprocess.crop_size {} must be in 1..=resize_edge ({})",
                self.crop_size, self.resize_edge
            )));
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::config("preprocess.std entries must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
}

#[derive(Debug, Clone)]
pub struct ImageSample {
    /// `(H, W, C)` after resize, crop, and channel normalization.
    pub pixels: Array3<f32>,
    pub label: Label,
    /// Binary `(H, W)` ground-truth region, present for anomalous test samples.
    pub mask: Option<Array2<u8>>,
    pub category: String,
    pub path: String,
}

impl ImageSample {
    pub fn size(&self) -> (usize, usize) {
        let (h, w, _) = self.pixels.dim();
        (h, w)
    }

    /// Mask, or an all-zero one for normal samples.
    pub fn mask_or_zeros(&self) -> Array2<u8> {
        self.mask.clone().unwrap_or_else(|| Array2::zeros(self.size()))
    }
}

#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub train: Vec<ImageSample>,
    pub val: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

/// Raw `(H, W, 3)` bytes of an RGB image.
pub fn rgb_to_array(img: &RgbImage) -> Array3<u8> {
    let (w, h) = img.dimensions();
    Array3::from_shape_vec((h as usize, w as usize, 3), img.as_raw().clone()).expect("rgb buffer")
}

pub fn gray_to_array(img: &GrayImage) -> Array2<u8> {
    let (w, h) = img.dimensions();
    Array2::from_shape_vec((h as usize, w as usize), img.as_raw().clone()).expect("gray buffer")
}

/// Resize to `resize_edge²` (bilinear), centre-crop to `crop_size²`, scale to
/// `[0, 1]`, then normalize each channel by `(v − mean)/std`.
pub fn preprocess_image(raw: ArrayView3<u8>, config: &PreprocessConfig) -> Result<Array3<f32>> {
    let (h, w, c) = raw.dim();
    if c != 3 {
        return Err(Error::InvalidInput(format!("expected 3 channels, got {c}")));
    }
    if h < 2 || w < 2 {
        return Err(Error::InvalidInput(format!("image {h}x{w} is smaller than 2x2")));
    }
    config.validate()?;
    let scaled = raw.mapv(|v| v as f32 / 255.0);
    let resized = imgops::resize_bilinear3(scaled.view(), config.resize_edge, config.resize_edge);
    let mut out = imgops::center_crop3(resized.view(), config.crop_size);
    for ((_, _, ch), v) in out.indexed_iter_mut() {
        *v = (*v - config.mean[ch]) / config.std[ch];
    }
    Ok(out)
}

/// Same geometry as [`preprocess_image`] with nearest-neighbour sampling,
/// binarized at half intensity.
pub fn preprocess_mask(raw: ArrayView2<u8>, config: &PreprocessConfig) -> Result<Array2<u8>> {
    let (h, w) = raw.dim();
    if h < 2 || w < 2 {
        return Err(Error::InvalidInput(format!("mask {h}x{w} is smaller than 2x2")));
    }
    config.validate()?;
    let binary = raw.mapv(|v| u8::from(v >= 128));
    let resized = imgops::resize_nearest(binary.view(), config.resize_edge, config.resize_edge);
    Ok(imgops::center_crop2(resized.view(), config.crop_size))
}

/// Seeded partition of `0..n` into sorted train and validation index sets.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * train_fraction).round() as usize;
    let n_train = n_train.min(n);
    let mut train = idx[..n_train].to_vec();
    let mut val = idx[n_train..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::DatasetLayout(path.to_path_buf()))
    }
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn load_rgb(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|e| Error::CorruptSample { path: path.to_path_buf(), reason: e.to_string() })
}

fn sample_from_file(path: &Path, label: Label, category: &str, config: &PreprocessConfig) -> Result<ImageSample> {
    let rgb = load_rgb(path)?;
    Ok(ImageSample {
        pixels: preprocess_image(rgb_to_array(&rgb).view(), config)?,
        label,
        mask: None,
        category: category.to_string(),
        path: path.display().to_string(),
    })
}

/// Loads one category laid out as `<root>/<category>/{train/good, test/<defect>, ground_truth/<defect>}`.
pub fn load_mvtec_category(
    root: &Path,
    category: &str,
    config: &PreprocessConfig,
    train_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    let base = root.join(category);
    let train_dir = base.join("train").join("good");
    let test_dir = base.join("test");
    let gt_dir = base.join("ground_truth");
    for dir in [&base, &train_dir, &test_dir, &gt_dir] {
        require_dir(dir)?;
    }

    let train_files = image_files(&train_dir)?;
    if train_files.is_empty() {
        return Err(Error::InvalidData(format!("no training images under {}", train_dir.display())));
    }
    let (train_idx, val_idx) = split_indices(train_files.len(), train_fraction, seed);
    let load_many = |idx: &[usize]| -> Result<Vec<ImageSample>> {
        idx.iter().map(|&i| sample_from_file(&train_files[i], Label::Normal, category, config)).collect()
    };
    let train = load_many(&train_idx)?;
    let val = load_many(&val_idx)?;

    let mut test = Vec::new();
    for defect_dir in sorted_subdirs(&test_dir)? {
        let defect = defect_dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let is_good = defect == "good";
        let mask_dir = gt_dir.join(&defect);
        if !is_good {
            require_dir(&mask_dir)?;
        }
        for file in image_files(&defect_dir)? {
            if is_good {
                test.push(sample_from_file(&file, Label::Normal, category, config)?);
                continue;
            }
            let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let mask_path = mask_dir.join(format!("{stem}_mask.png"));
            if !mask_path.is_file() {
                return Err(Error::DatasetLayout(mask_path));
            }
            let rgb = load_rgb(&file)?;
            let mask_img = image::open(&mask_path)
                .map_err(|e| Error::CorruptSample { path: mask_path.clone(), reason: e.to_string() })?
                .to_luma8();
            if rgb.dimensions() != mask_img.dimensions() {
                return Err(Error::CorruptSample {
                    path: file.clone(),
                    reason: format!(
                        "image is {:?} but mask is {:?}",
                        rgb.dimensions(),
                        mask_img.dimensions()
                    ),
                });
            }
            test.push(ImageSample {
                pixels: preprocess_image(rgb_to_array(&rgb).view(), config)?,
                label: Label::Anomalous,
                mask: Some(preprocess_mask(gray_to_array(&mask_img).view(), config)?),
                category: category.to_string(),
                path: file.display().to_string(),
            });
        }
    }
    Ok(DatasetSplit { train, val, test })
}

/// Parameters of the synthetic texture dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
    /// Side length range of the injected square patch (inclusive).
    pub patch_min: usize,
    pub patch_max: usize,
    /// Spatial smoothing of the normal texture, in pixels.
    pub texture_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            size: 64,
            n_train: 40,
            n_val: 10,
            n_test_normal: 10,
            n_test_anomalous: 10,
            patch_min: 12,
            patch_max: 20,
            texture_sigma: 2.5,
            seed: 3,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::InvalidInput(format!("synthetic size {} is below 8", self.size)));
        }
        if self.patch_min == 0 || self.patch_min > self.patch_max {
            return Err(Error::InvalidInput("synthetic patch range must satisfy 1 <= min <= max".into()));
        }
        if self.patch_max > self.size {
            return Err(Error::InvalidInput(format!(
                "anomaly patch {} exceeds image size {}",
                self.patch_max, self.size
            )));
        }
        Ok(())
    }
}

/// Raw synthetic images before preprocessing.
#[derive(Debug, Clone)]
pub struct SyntheticRaw {
    pub normals: Vec<RgbImage>,
    pub test_normal: Vec<RgbImage>,
    pub test_anomalous: Vec<(RgbImage, GrayImage)>,
}

const BASE_TINT: [f64; 3] = [0.55, 0.47, 0.38];
const PATCH_TINT: [f64; 3] = [0.15, 0.35, 0.85];

fn unit_noise_field(rng: &mut ChaCha8Rng, size: usize, sigma: f64) -> Array2<f32> {
    let raw = Array2::from_shape_fn((size, size), |_| {
        let v: f64 = StandardNormal.sample(rng);
        v as f32
    });
    let smooth = imgops::gaussian_blur(raw.view(), sigma);
    let mean = smooth.mean().unwrap_or(0.0);
    let std = (smooth.mapv(|v| (v - mean) * (v - mean)).mean().unwrap_or(1.0)).sqrt().max(1e-6);
    smooth.mapv(|v| (v - mean) / std)
}

fn texture(rng: &mut ChaCha8Rng, size: usize, sigma: f64) -> Array3<f64> {
    let luminance = unit_noise_field(rng, size, sigma);
    let mut out = Array3::<f64>::zeros((size, size, 3));
    for (ch, tint) in BASE_TINT.iter().enumerate() {
        let chroma = unit_noise_field(rng, size, sigma);
        for y in 0..size {
            for x in 0..size {
                out[[y, x, ch]] = tint + 0.16 * luminance[[y, x]] as f64 + 0.04 * chroma[[y, x]] as f64;
            }
        }
    }
    out
}

fn to_rgb(field: &Array3<f64>) -> RgbImage {
    let (h, w, _) = field.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (field[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Overwrites a random square with a high-frequency striped pattern; returns its mask.
fn inject_patch(rng: &mut ChaCha8Rng, field: &mut Array3<f64>, spec: &SyntheticSpec) -> GrayImage {
    let size = spec.size;
    let side = rng.random_range(spec.patch_min..=spec.patch_max);
    let top = rng.random_range(0..=size - side);
    let left = rng.random_range(0..=size - side);
    let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let period: f64 = rng.random_range(3.0..6.0);
    let (ct, st) = (theta.cos(), theta.sin());
    let mut mask = GrayImage::new(size as u32, size as u32);
    for y in top..top + side {
        for x in left..left + side {
            let phase = (x as f64 * ct + y as f64 * st) * std::f64::consts::TAU / period;
            let stripe = if phase.sin() >= 0.0 { 1.0 } else { -1.0 };
            for (ch, tint) in PATCH_TINT.iter().enumerate() {
                field[[y, x, ch]] = tint + 0.3 * stripe;
            }
            mask.put_pixel(x as u32, y as u32, image::Luma([255]));
        }
    }
    mask
}

/// Draws every synthetic image from one seeded stream.
pub fn generate_synthetic_raw(spec: &SyntheticSpec) -> Result<SyntheticRaw> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sigma = spec.texture_sigma;
    let normals = (0..spec.n_train + spec.n_val).map(|_| to_rgb(&texture(&mut rng, spec.size, sigma))).collect();
    let test_normal = (0..spec.n_test_normal).map(|_| to_rgb(&texture(&mut rng, spec.size, sigma))).collect();
    let test_anomalous = (0..spec.n_test_anomalous)
        .map(|_| {
            let mut field = texture(&mut rng, spec.size, sigma);
            let mask = inject_patch(&mut rng, &mut field, spec);
            (to_rgb(&field), mask)
        })
        .collect();
    Ok(SyntheticRaw { normals, test_normal, test_anomalous })
}

/// In-memory synthetic split: the first `n_train` normals train, the next `n_val` validate.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, config: &PreprocessConfig) -> Result<DatasetSplit> {
    let raw = generate_synthetic_raw(spec)?;
    let category = "synthetic";
    let normal = |img: &RgbImage, path: String| -> Result<ImageSample> {
        Ok(ImageSample {
            pixels: preprocess_image(rgb_to_array(img).view(), config)?,
            label: Label::Normal,
            mask: None,
            category: category.into(),
            path,
        })
    };
    let mut split = DatasetSplit::default();
    for (i, img) in raw.normals.iter().enumerate() {
        let s = normal(img, format!("synthetic/train/good/{i:03}.png"))?;
        if i < spec.n_train {
            split.train.push(s);
        } else {
            split.val.push(s);
        }
    }
    for (i, img) in raw.test_normal.iter().enumerate() {
        split.test.push(normal(img, format!("synthetic/test/good/{i:03}.png"))?);
    }
    for (i, (img, mask)) in raw.test_anomalous.iter().enumerate() {
        split.test.push(ImageSample {
            pixels: preprocess_image(rgb_to_array(img).view(), config)?,
            label: Label::Anomalous,
            mask: Some(preprocess_mask(gray_to_array(mask).view(), config)?),
            category: category.into(),
            path: format!("synthetic/test/patch/{i:03}.png"),
        });
    }
    Ok(split)
}

/// Writes the synthetic set in the MVTec directory layout under `<root>/<category>`.
pub fn write_synthetic_layout(spec: &SyntheticSpec, root: &Path, category: &str) -> Result<PathBuf> {
    let raw = generate_synthetic_raw(spec)?;
    let base = root.join(category);
    let dirs = [
        base.join("train/good"),
        base.join("test/good"),
        base.join("test/patch"),
        base.join("ground_truth/patch"),
    ];
    for d in &dirs {
        std::fs::create_dir_all(d)?;
    }
    for (i, img) in raw.normals.iter().enumerate() {
        img.save(dirs[0].join(format!("{i:03}.png")))?;
    }
    for (i, img) in raw.test_normal.iter().enumerate() {
        img.save(dirs[1].join(format!("{i:03}.png")))?;
    }
    for (i, (img, mask)) in raw.test_anomalous.iter().enumerate() {
        img.save(dirs[2].join(format!("{i:03}.png")))?;
        mask.save(dirs[3].join(format!("{i:03}_mask.png")))?;
    }
    Ok(base)
}

/// Undo channel normalization, for overlays.
pub fn denormalize(pixels: ArrayView3<f32>, config: &PreprocessConfig) -> Array3<f32> {
    let mut out = pixels.to_owned();
    for ((_, _, ch), v) in out.indexed_iter_mut() {
        *v = (*v * config.std[ch] + config.mean[ch]).clamp(0.0, 1.0);
    }
    out
}

/// Test-only access to mask geometry checks.
pub fn mask_area(mask: ArrayView2<u8>) -> usize {
    mask.iter().filter(|&&v| v > 0).count()
}
