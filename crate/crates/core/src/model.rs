//! Assembly of the frozen guide and the trainable student head.

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbones::{build_guide, guide_skeleton, Backbone, BackboneConfig, FeaturePyramid};
use crate::datasets::ImageSample;
use crate::error::{Error, Result};
use crate::mapper::{Mapper, MapperConfig, TokenSource};
use crate::params::ParamStore;
use crate::tfm::{Tfm, TfmConfig, TfmOutput};
use crate::tokenizer::{TokenGroup, Tokenizer, TokenizerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub tokenizer: TokenizerConfig,
    pub tfm: TfmConfig,
    pub mapper: MapperConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.tokenizer.validate()?;
        self.tfm.validate()?;
        if self.mapper.token_source == TokenSource::Decoder && !self.tfm.use_decoder {
            return Err(Error::config("mapper.token_source = decoder requires tfm.use_decoder = true"));
        }
        Ok(())
    }
}

/// The trainable part downstream of the two backbones.
pub struct Head {
    pub guide_tokenizer: Tokenizer,
    pub student_tokenizer: Tokenizer,
    pub tfm: Tfm,
    pub mapper: Mapper,
}

#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub guide_tokens: TokenGroup,
    pub student_tokens: TokenGroup,
    pub tfm: TfmOutput,
    pub mapped: FeaturePyramid,
}

impl Head {
    pub fn new(store: &mut ParamStore, config: &ModelConfig) -> Result<Self> {
        let channels = config.backbone.layer_channels();
        let d = config.tokenizer.dim;
        Ok(Self {
            guide_tokenizer: Tokenizer::new(store, "guide_tokenizer", &channels, &config.tokenizer)?,
            student_tokenizer: Tokenizer::new(store, "student_tokenizer", &channels, &config.tokenizer)?,
            tfm: Tfm::new(store, "tfm", d, &config.tfm)?,
            mapper: Mapper::new(store, "mapper", &channels, d, config.tokenizer.groups, &config.mapper)?,
        })
    }

    /// Tokenize both pyramids, run the TFM, and map tokens back onto the student grid.
    pub fn forward(&self, guide: &FeaturePyramid, student: &FeaturePyramid) -> Result<HeadOutput> {
        guide.ensure_aligned(student)?;
        let guide_tokens = self.guide_tokenizer.tokenize_pyramid(guide)?;
        let student_tokens = self.student_tokenizer.tokenize_pyramid(student)?;
        let tfm = self.tfm.forward(&guide_tokens.tokens, &student_tokens.tokens)?;
        let mapped = self.mapper.map_pyramid(student, guide, self.mapper.token_stream(&tfm)?)?;
        Ok(HeadOutput { guide_tokens, student_tokens, tfm, mapped })
    }
}

/// Where the guide's weights come from.
#[derive(Debug, Clone, Copy)]
pub enum GuideInit<'a> {
    /// The weight cache (or the fixed seed for the tiny family).
    Pretrained(Option<&'a Path>),
    /// Left at initialization; the caller loads them afterwards.
    Deferred,
}

pub struct GTrans {
    pub config: ModelConfig,
    guide: Backbone,
    guide_store: ParamStore,
    student: Backbone,
    pub head: Head,
    store: ParamStore,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub guide: FeaturePyramid,
    pub student: FeaturePyramid,
    pub head: HeadOutput,
}

impl ForwardOutput {
    pub fn mapped(&self) -> &FeaturePyramid {
        &self.head.mapped
    }
}

impl GTrans {
    pub fn new(config: &ModelConfig, seed: u64, weight_cache: Option<&Path>) -> Result<Self> {
        Self::with_dtype(config, seed, weight_cache, DType::F32)
    }

    pub fn with_dtype(config: &ModelConfig, seed: u64, weight_cache: Option<&Path>, dtype: DType) -> Result<Self> {
        Self::build(config, seed, dtype, GuideInit::Pretrained(weight_cache))
    }

    pub fn build(config: &ModelConfig, seed: u64, dtype: DType, guide_init: GuideInit<'_>) -> Result<Self> {
        config.validate()?;
        let mut guide_cfg = config.backbone.clone();
        guide_cfg.pretrained = true;
        let (guide, guide_store) = match guide_init {
            GuideInit::Pretrained(cache) => build_guide(&guide_cfg, cache, dtype)?,
            GuideInit::Deferred => guide_skeleton(&guide_cfg, dtype)?,
        };
        let mut student_cfg = config.backbone.clone();
        student_cfg.pretrained = false;
        let mut store = ParamStore::new(seed, dtype);
        store.set_prefix("student.");
        let student = Backbone::new(&student_cfg, &mut store)?;
        store.set_prefix("");
        let head = Head::new(&mut store, config)?;
        Ok(Self { config: config.clone(), guide, guide_store, student, head, store })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Everything the optimizer may update.
    pub fn trainable_vars(&self) -> Vec<Var> {
        self.store.params().map(|(_, v)| v.clone()).collect()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn guide_store(&self) -> &ParamStore {
        &self.guide_store
    }

    pub fn guide_checksum(&self) -> Result<String> {
        self.guide_store.checksum()
    }

    pub fn guide_backbone(&self) -> &Backbone {
        &self.guide
    }

    pub fn student_backbone(&self) -> &Backbone {
        &self.student
    }

    /// `train` selects batch statistics in the student's normalization layers.
    pub fn forward(&self, batch: &Tensor, train: bool) -> Result<ForwardOutput> {
        let guide = self.guide.extract_pyramid(batch, false)?;
        let student = self.student.extract_pyramid(batch, train)?;
        let head = self.head.forward(&guide, &student)?;
        Ok(ForwardOutput { guide, student, head })
    }

    /// Stacks preprocessed samples into a `(B, 3, H, W)` tensor.
    pub fn batch_tensor(&self, samples: &[&ImageSample]) -> Result<Tensor> {
        batch_tensor(samples, self.dtype(), self.device())
    }
}

pub fn batch_tensor(samples: &[&ImageSample], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| Error::InvalidData("empty batch".into()))?;
    let (h, w) = first.size();
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    for s in samples {
        if s.size() != (h, w) || s.pixels.dim().2 != 3 {
            return Err(Error::shape(format!("sample {} has shape {:?}", s.path, s.pixels.dim())));
        }
        for c in 0..3 {
            data.extend(s.pixels.slice(ndarray::s![.., .., c]).iter().copied());
        }
    }
    Ok(Tensor::from_vec(data, (samples.len(), 3, h, w), device)?.to_dtype(dtype)?)
}
