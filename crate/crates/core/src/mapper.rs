//! Writes token information back onto each critical layer's pixel grid with
//! pixel-to-token cross-attention and a residual onto the student features.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbones::{FeaturePyramid, Source};
use crate::error::{Error, Result};
use crate::nn::{softmax_last, Linear};
use crate::params::ParamStore;
use crate::tfm::TfmOutput;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenSource {
    Encoder,
    Decoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuerySource {
    Guide,
    Student,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapperConfig {
    pub token_source: TokenSource,
    pub query_source: QuerySource,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self { token_source: TokenSource::Encoder, query_source: QuerySource::Guide }
    }
}

/// Projections for one critical layer: pixel queries `c → c`, token keys and values `d → c`.
#[derive(Clone, Debug)]
pub struct LayerMapper {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    channels: usize,
}

impl LayerMapper {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), channels, channels)?,
            key: Linear::new(store, &format!("{name}.key"), dim, channels)?,
            value: Linear::zeros(store, &format!("{name}.value"), dim, channels)?,
            channels,
        })
    }

    /// Per-pixel attention over the block's tokens, `(B, H·W, g)`.
    pub fn attention(&self, query_map: &Tensor, tokens: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = query_map.dims4()?;
        if c != self.channels {
            return Err(Error::shape(format!("mapper expects {} channels, got {c}", self.channels)));
        }
        let pixels = query_map.reshape((b, c, h * w))?.transpose(1, 2)?;
        let q = self.query.forward(&pixels)?;
        let k = self.key.forward(&tokens.transpose(1, 2)?)?;
        let logits = (q.matmul(&k.transpose(1, 2)?)? / (c as f64).sqrt())?;
        softmax_last(&logits)
    }

    /// `student + attention(query_map, tokens)·values`, all maps `(B, c, H, W)`,
    /// tokens `(B, d, g)`.
    pub fn forward(&self, student: &Tensor, query_map: &Tensor, tokens: &Tensor) -> Result<Tensor> {
        if student.dims() != query_map.dims() {
            return Err(Error::shape(format!(
                "student layer {:?} vs query layer {:?}",
                student.dims(),
                query_map.dims()
            )));
        }
        let (b, c, h, w) = student.dims4()?;
        let weights = self.attention(query_map, tokens)?;
        let v = self.value.forward(&tokens.transpose(1, 2)?)?;
        let mapped = weights.matmul(&v)?.transpose(1, 2)?.reshape((b, c, h, w))?;
        Ok((student + mapped)?)
    }
}

#[derive(Clone, Debug)]
pub struct Mapper {
    pub layers: Vec<LayerMapper>,
    pub config: MapperConfig,
    groups: usize,
}

impl Mapper {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: &[usize],
        dim: usize,
        groups: usize,
        config: &MapperConfig,
    ) -> Result<Self> {
        let layers = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| LayerMapper::new(store, &format!("{name}.{i}"), c, dim))
            .collect::<Result<_>>()?;
        Ok(Self { layers, config: config.clone(), groups })
    }

    pub fn token_stream<'a>(&self, tfm: &'a TfmOutput) -> Result<&'a Tensor> {
        match self.config.token_source {
            TokenSource::Encoder => Ok(&tfm.encoder),
            TokenSource::Decoder => tfm
                .decoder
                .as_ref()
                .ok_or_else(|| Error::config("mapper.token_source = decoder requires tfm.use_decoder")),
        }
    }

    /// Maps every layer; layer `k` reads token columns `k·g .. (k+1)·g`.
    pub fn map_pyramid(&self, student: &FeaturePyramid, guide: &FeaturePyramid, tokens: &Tensor) -> Result<FeaturePyramid> {
        student.ensure_aligned(guide)?;
        if student.len() != self.layers.len() {
            return Err(Error::shape(format!("pyramid has {} layers, mapper has {}", student.len(), self.layers.len())));
        }
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(k, m)| {
                let block = tokens.narrow(2, k * self.groups, self.groups)?;
                let query = match self.config.query_source {
                    QuerySource::Guide => &guide.layers[k],
                    QuerySource::Student => &student.layers[k],
                };
                m.forward(&student.layers[k], query, &block)
            })
            .collect::<Result<_>>()?;
        Ok(FeaturePyramid { layers, stages: student.stages.clone(), source: Source::Mapped })
    }
}
