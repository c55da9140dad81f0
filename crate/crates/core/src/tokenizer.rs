//! Visual tokenizer: point-wise projections plus spatial attention turn each
//! critical-layer feature map into `g` tokens of width `d`.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbones::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{softmax, Linear};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    /// Semantic groups per layer.
    pub groups: usize,
    /// Token width.
    pub dim: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { groups: 8, dim: 256 }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.dim == 0 {
            return Err(Error::config("tokenizer.groups and tokenizer.dim must be positive"));
        }
        Ok(())
    }
}

/// Projections for one critical layer.
#[derive(Clone, Debug)]
pub struct LayerTokenizer {
    pub group_proj: Linear,
    pub value_proj: Linear,
    channels: usize,
}

/// Tokens of a whole pyramid, `(B, d, g·L)`; column block `k` belongs to `layer_order[k]`.
#[derive(Clone, Debug)]
pub struct TokenGroup {
    pub tokens: Tensor,
    pub groups: usize,
    pub layer_order: Vec<usize>,
}

impl TokenGroup {
    pub fn dim(&self) -> Result<usize> {
        Ok(self.tokens.dim(1)?)
    }

    pub fn num_tokens(&self) -> Result<usize> {
        Ok(self.tokens.dim(2)?)
    }

    /// `(B, d, g)` tokens of the `k`-th layer block.
    pub fn block(&self, k: usize) -> Result<Tensor> {
        Ok(self.tokens.narrow(2, k * self.groups, self.groups)?)
    }
}

impl LayerTokenizer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, config: &TokenizerConfig) -> Result<Self> {
        Ok(Self {
            group_proj: Linear::new(store, &format!("{name}.group_proj"), channels, config.groups)?,
            value_proj: Linear::new(store, &format!("{name}.value_proj"), channels, config.dim)?,
            channels,
        })
    }

    /// Spatial attention weights `(B, H·W, g)`; each group column sums to one.
    pub fn attention(&self, feature_map: &Tensor) -> Result<Tensor> {
        let pixels = self.flatten(feature_map)?;
        let logits = (self.group_proj.forward(&pixels)? / (self.channels as f64).sqrt())?;
        softmax(&logits, 1)
    }

    fn flatten(&self, feature_map: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = feature_map.dims4()?;
        if c != self.channels {
            return Err(Error::shape(format!("tokenizer expects {} channels, got {c}", self.channels)));
        }
        Ok(feature_map.reshape((b, c, h * w))?.transpose(1, 2)?)
    }

    /// `(B, C, H, W) -> (B, d, g)`.
    pub fn forward(&self, feature_map: &Tensor) -> Result<Tensor> {
        let weights = self.attention(feature_map)?;
        let values = self.value_proj.forward(&self.flatten(feature_map)?)?;
        let tokens = weights.transpose(1, 2)?.matmul(&values)?;
        Ok(tokens.transpose(1, 2)?.contiguous()?)
    }
}

/// One [`LayerTokenizer`] per critical layer.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub layers: Vec<LayerTokenizer>,
    groups: usize,
}

impl Tokenizer {
    pub fn new(store: &mut ParamStore, name: &str, channels: &[usize], config: &TokenizerConfig) -> Result<Self> {
        config.validate()?;
        let layers = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| LayerTokenizer::new(store, &format!("{name}.{i}"), c, config))
            .collect::<Result<_>>()?;
        Ok(Self { layers, groups: config.groups })
    }

    pub fn tokenize_pyramid(&self, pyramid: &FeaturePyramid) -> Result<TokenGroup> {
        if pyramid.len() != self.layers.len() {
            return Err(Error::shape(format!(
                "pyramid has {} layers, tokenizer has {}",
                pyramid.len(),
                self.layers.len()
            )));
        }
        let blocks = self
            .layers
            .iter()
            .zip(&pyramid.layers)
            .map(|(tok, fm)| tok.forward(fm))
            .collect::<Result<Vec<_>>>()?;
        Ok(TokenGroup {
            tokens: Tensor::cat(&blocks, 2)?,
            groups: self.groups,
            layer_order: pyramid.stages.clone(),
        })
    }
}
