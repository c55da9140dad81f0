//! ResNet-family feature extractors exposing intermediate stage outputs.
//!
//! Parameter names follow the torchvision state-dict layout (`conv1.weight`,
//! `layer2.0.downsample.1.running_mean`, ...) so converted pretrained weights
//! load without a name map.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Resnet34,
    WideResnet50_2,
    TinyTest,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Resnet34 => "resnet34",
            Family::WideResnet50_2 => "wide_resnet50_2",
            Family::TinyTest => "tiny_test",
        }
    }

    /// Output channels of stages 1..=4.
    pub fn stage_channels(self) -> [usize; 4] {
        match self {
            Family::Resnet34 => [64, 128, 256, 512],
            Family::WideResnet50_2 => [256, 512, 1024, 2048],
            Family::TinyTest => [8, 16, 32, 64],
        }
    }

    pub fn num_stages(self) -> usize {
        4
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub family: Family,
    /// Stage indices (1-based) whose outputs are tapped, strictly increasing.
    pub critical_layers: Vec<usize>,
    pub pretrained: bool,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.critical_layers.is_empty() {
            return Err(Error::config("backbone.critical_layers must not be empty"));
        }
        if self.critical_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("backbone.critical_layers must be strictly increasing"));
        }
        let n = self.family.num_stages();
        if let Some(&bad) = self.critical_layers.iter().find(|&&l| l == 0 || l > n) {
            return Err(Error::config(format!(
                "backbone.critical_layers entry {bad} outside 1..={n} for {}",
                self.family.name()
            )));
        }
        Ok(())
    }

    pub fn layer_channels(&self) -> Vec<usize> {
        let ch = self.family.stage_channels();
        self.critical_layers.iter().map(|&l| ch[l - 1]).collect()
    }

    /// Downsampling factor of stage `l` relative to the input.
    pub fn stride_of(stage: usize) -> usize {
        1 << (stage + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Guide,
    Student,
    Mapped,
}

/// Per-critical-layer activations, each `(B, C, H, W)`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub layers: Vec<Tensor>,
    pub stages: Vec<usize>,
    pub source: Source,
}

impl FeaturePyramid {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.layers.first().map(|t| t.dim(0)).transpose()?.unwrap_or(0))
    }

    /// `(C, H, W)` per layer.
    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        self.layers
            .iter()
            .map(|t| {
                let d = t.dims();
                (d[1], d[2], d[3])
            })
            .collect()
    }

    /// The pyramid of a single batch element, keeping a batch axis of one.
    pub fn item(&self, index: usize) -> Result<FeaturePyramid> {
        let layers = self.layers.iter().map(|t| t.narrow(0, index, 1)).collect::<candle_core::Result<_>>()?;
        Ok(FeaturePyramid { layers, stages: self.stages.clone(), source: self.source })
    }

    pub fn detach(&self) -> FeaturePyramid {
        FeaturePyramid { layers: self.layers.iter().map(|t| t.detach()).collect(), ..self.clone() }
    }

    pub fn ensure_aligned(&self, other: &FeaturePyramid) -> Result<()> {
        if self.stages != other.stages {
            return Err(Error::shape(format!("pyramid stages {:?} vs {:?}", self.stages, other.stages)));
        }
        for (a, b) in self.layers.iter().zip(&other.layers) {
            if a.dims() != b.dims() {
                return Err(Error::shape(format!("pyramid layer {:?} vs {:?}", a.dims(), b.dims())));
            }
        }
        Ok(())
    }
}

struct Downsample {
    conv: Conv2d,
    bn: BatchNorm2d,
}

enum Block {
    Basic {
        conv1: Conv2d,
        bn1: BatchNorm2d,
        conv2: Conv2d,
        bn2: BatchNorm2d,
        downsample: Option<Downsample>,
    },
    Bottleneck {
        conv1: Conv2d,
        bn1: BatchNorm2d,
        conv2: Conv2d,
        bn2: BatchNorm2d,
        conv3: Conv2d,
        bn3: BatchNorm2d,
        downsample: Option<Downsample>,
    },
}

impl Block {
    fn forward(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        let (out, downsample) = match self {
            Block::Basic { conv1, bn1, conv2, bn2, downsample } => {
                let h = bn1.forward(&conv1.forward(xs)?, train)?.relu()?;
                (bn2.forward(&conv2.forward(&h)?, train)?, downsample)
            }
            Block::Bottleneck { conv1, bn1, conv2, bn2, conv3, bn3, downsample } => {
                let h = bn1.forward(&conv1.forward(xs)?, train)?.relu()?;
                let h = bn2.forward(&conv2.forward(&h)?, train)?.relu()?;
                (bn3.forward(&conv3.forward(&h)?, train)?, downsample)
            }
        };
        let identity = match downsample {
            Some(d) => d.bn.forward(&d.conv.forward(xs)?, train)?,
            None => xs.clone(),
        };
        Ok((out + identity)?.relu()?)
    }
}

struct StagePlan {
    blocks: [usize; 4],
    bottleneck: bool,
    stem_channels: usize,
    stem_kernel: usize,
    /// Bottleneck inner width multiplier (2 for the wide variant).
    width_factor: usize,
}

fn plan(family: Family) -> StagePlan {
    match family {
        Family::Resnet34 => StagePlan {
            blocks: [3, 4, 6, 3],
            bottleneck: false,
            stem_channels: 64,
            stem_kernel: 7,
            width_factor: 1,
        },
        Family::WideResnet50_2 => StagePlan {
            blocks: [3, 4, 6, 3],
            bottleneck: true,
            stem_channels: 64,
            stem_kernel: 7,
            width_factor: 2,
        },
        Family::TinyTest => StagePlan {
            blocks: [1, 1, 1, 1],
            bottleneck: false,
            stem_channels: 8,
            stem_kernel: 3,
            width_factor: 1,
        },
    }
}

/// A backbone instance; only stages up to the deepest critical layer are built.
pub struct Backbone {
    config: BackboneConfig,
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Vec<Block>>,
    frozen: bool,
}

impl Backbone {
    pub fn new(config: &BackboneConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let p = plan(config.family);
        let stem_pad = p.stem_kernel / 2;
        let stem_conv = Conv2d::new(store, "conv1", 3, p.stem_channels, p.stem_kernel, 2, stem_pad)?;
        let stem_bn = BatchNorm2d::new(store, "bn1", p.stem_channels)?;
        let out_channels = config.family.stage_channels();
        let deepest = *config.critical_layers.last().expect("validated non-empty");
        let mut in_ch = p.stem_channels;
        let mut stages = Vec::new();
        for stage in 0..deepest {
            let out_ch = out_channels[stage];
            let stride = if stage == 0 { 1 } else { 2 };
            let mut blocks = Vec::new();
            for b in 0..p.blocks[stage] {
                let name = format!("layer{}.{b}", stage + 1);
                let s = if b == 0 { stride } else { 1 };
                let downsample = if b == 0 && (s != 1 || in_ch != out_ch) {
                    Some(Downsample {
                        conv: Conv2d::new(store, &format!("{name}.downsample.0"), in_ch, out_ch, 1, s, 0)?,
                        bn: BatchNorm2d::new(store, &format!("{name}.downsample.1"), out_ch)?,
                    })
                } else {
                    None
                };
                let block = if p.bottleneck {
                    let width = out_ch / 4 * p.width_factor;
                    Block::Bottleneck {
                        conv1: Conv2d::new(store, &format!("{name}.conv1"), in_ch, width, 1, 1, 0)?,
                        bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), width)?,
                        conv2: Conv2d::new(store, &format!("{name}.conv2"), width, width, 3, s, 1)?,
                        bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), width)?,
                        conv3: Conv2d::new(store, &format!("{name}.conv3"), width, out_ch, 1, 1, 0)?,
                        bn3: BatchNorm2d::new(store, &format!("{name}.bn3"), out_ch)?,
                        downsample,
                    }
                } else {
                    Block::Basic {
                        conv1: Conv2d::new(store, &format!("{name}.conv1"), in_ch, out_ch, 3, s, 1)?,
                        bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), out_ch)?,
                        conv2: Conv2d::new(store, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1)?,
                        bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), out_ch)?,
                        downsample,
                    }
                };
                blocks.push(block);
                in_ch = out_ch;
            }
            stages.push(blocks);
        }
        Ok(Self { config: config.clone(), stem_conv, stem_bn, stages, frozen: false })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Marks the network non-trainable; forward passes run in inference mode
    /// and return detached activations. Idempotent.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// `batch` is `(B, 3, H, W)`; returns the configured stage outputs in order.
    pub fn extract_pyramid(&self, batch: &Tensor, train: bool) -> Result<FeaturePyramid> {
        let dims = batch.dims();
        if dims.len() != 4 || dims[1] != 3 {
            return Err(Error::shape(format!("expected (B, 3, H, W) input, got {dims:?}")));
        }
        let deepest = *self.config.critical_layers.last().expect("validated");
        let stride = BackboneConfig::stride_of(deepest);
        if dims[2] % stride != 0 || dims[3] % stride != 0 {
            return Err(Error::shape(format!(
                "input {}x{} is not divisible by the backbone stride {stride}",
                dims[2], dims[3]
            )));
        }
        let train = train && !self.frozen;
        let mut xs = self.stem_bn.forward(&self.stem_conv.forward(batch)?, train)?.relu()?;
        xs = stem_pool(&xs, plan(self.config.family).stem_kernel)?;
        let mut layers = Vec::with_capacity(self.config.critical_layers.len());
        for (i, stage) in self.stages.iter().enumerate() {
            for block in stage {
                xs = block.forward(&xs, train)?;
            }
            if self.config.critical_layers.contains(&(i + 1)) {
                layers.push(if self.frozen { xs.detach() } else { xs.clone() });
            }
        }
        let source = if self.frozen { Source::Guide } else { Source::Student };
        Ok(FeaturePyramid { layers, stages: self.config.critical_layers.clone(), source })
    }
}

/// Stem max pool. ResNet uses 3x3/2 with one pixel of padding; inputs are
/// post-ReLU, so zero padding is equivalent to -inf padding.
fn stem_pool(xs: &Tensor, stem_kernel: usize) -> Result<Tensor> {
    if stem_kernel == 7 {
        let padded = xs.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        Ok(padded.max_pool2d_with_stride(3, 2)?)
    } else {
        Ok(xs.max_pool2d_with_stride(2, 2)?)
    }
}

/// Loads safetensors weights named in the torchvision layout into `store`.
pub fn load_pretrained(store: &ParamStore, path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Checkpoint(format!("pretrained weights not found at {}", path.display())));
    }
    let tensors: HashMap<String, Tensor> = candle_core::safetensors::load(path, store.device())?;
    store.load_named(&tensors)
}

/// Seed for the fixed "pretrained" weights of the tiny test family.
pub const TINY_GUIDE_SEED: u64 = 0x6775_6964_6531;

/// Builds a frozen guide: pretrained weights from `weight_cache/<family>.safetensors`,
/// or the fixed seeded weights for the tiny test family.
pub fn build_guide(config: &BackboneConfig, weight_cache: Option<&Path>, dtype: DType) -> Result<(Backbone, ParamStore)> {
    let mut store = ParamStore::new(TINY_GUIDE_SEED, dtype);
    let mut net = Backbone::new(config, &mut store)?;
    if config.family != Family::TinyTest {
        if !config.pretrained {
            return Err(Error::config("the guide backbone must be pretrained"));
        }
        let cache = weight_cache.ok_or_else(|| Error::config("paths.weight_cache is required for pretrained guides"))?;
        load_pretrained(&store, &cache.join(format!("{}.safetensors", config.family.name())))?;
    }
    net.freeze();
    Ok((net, store))
}

/// A frozen guide whose weights are left at their seeded initialization, to be
/// overwritten from a checkpoint.
pub fn guide_skeleton(config: &BackboneConfig, dtype: DType) -> Result<(Backbone, ParamStore)> {
    let mut store = ParamStore::new(TINY_GUIDE_SEED, dtype);
    let mut net = Backbone::new(config, &mut store)?;
    net.freeze();
    Ok((net, store))
}
