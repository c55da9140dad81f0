//! Token Transformer: encoder blocks over guide tokens, decoder blocks that
//! query with student tokens and attend to the final encoder output.
//!
//! Tokens are columns of a `(B, d, N)` tensor. Attention is single-head with
//! the softmax taken over the key index for every query column, there is no
//! positional encoding, and the feed-forward is `L1·relu(L2·x)` built from
//! point-wise (`d × d`) projections.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax, ColumnLayerNorm, Linear};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TfmConfig {
    /// Encoder (and decoder) block count.
    pub blocks: usize,
    pub use_decoder: bool,
}

impl Default for TfmConfig {
    fn default() -> Self {
        Self { blocks: 2, use_decoder: true }
    }
}

impl TfmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks < 1 {
            return Err(Error::config("tfm.blocks must be at least 1"));
        }
        Ok(())
    }
}

/// Parameters of one encoder or decoder block.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub l1: Linear,
    pub l2: Linear,
    pub attn_norm: ColumnLayerNorm,
    pub out_norm: ColumnLayerNorm,
    dim: usize,
}

impl BlockParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            w_q: Linear::no_bias(store, &format!("{name}.w_q"), dim, dim)?,
            w_k: Linear::no_bias(store, &format!("{name}.w_k"), dim, dim)?,
            w_v: Linear::no_bias(store, &format!("{name}.w_v"), dim, dim)?,
            l1: Linear::new(store, &format!("{name}.l1"), dim, dim)?,
            l2: Linear::new(store, &format!("{name}.l2"), dim, dim)?,
            attn_norm: ColumnLayerNorm::new(store, &format!("{name}.attn_norm"), dim)?,
            out_norm: ColumnLayerNorm::new(store, &format!("{name}.out_norm"), dim)?,
            dim,
        })
    }

    fn check(&self, xs: &Tensor) -> Result<()> {
        let d = xs.dims();
        if d.len() != 3 || d[1] != self.dim {
            return Err(Error::shape(format!("expected (B, {}, N) tokens, got {d:?}", self.dim)));
        }
        Ok(())
    }

    /// `(B, N, N)` compatibility weights; entry `[i, j]` weighs key `i` for query `j`.
    pub fn attention_weights(&self, queries_from: &Tensor, keys_from: &Tensor) -> Result<Tensor> {
        let q = self.w_q.forward_columns(queries_from)?;
        let k = self.w_k.forward_columns(keys_from)?;
        let logits = (k.transpose(1, 2)?.matmul(&q)? / (self.dim as f64).sqrt())?;
        softmax(&logits, 1)
    }

    fn attend(&self, queries_from: &Tensor, keys_from: &Tensor) -> Result<Tensor> {
        let weights = self.attention_weights(queries_from, keys_from)?;
        let v = self.w_v.forward_columns(keys_from)?;
        Ok(v.matmul(&weights)?)
    }

    fn residual_stack(&self, input: &Tensor, attended: &Tensor) -> Result<Tensor> {
        let a = (input + self.attn_norm.forward(attended)?)?;
        let ff = self.l1.forward_columns(&self.l2.forward_columns(&a)?.relu()?)?;
        self.out_norm.forward(&(a + ff)?)
    }
}

/// Self-attention block over `input`.
pub fn encoder_block(input: &Tensor, params: &BlockParams) -> Result<Tensor> {
    params.check(input)?;
    let attended = params.attend(input, input)?;
    params.residual_stack(input, &attended)
}

/// Cross-attention block: queries from `input`, keys and values from `memory`.
pub fn decoder_block(input: &Tensor, memory: &Tensor, params: &BlockParams) -> Result<Tensor> {
    params.check(input)?;
    params.check(memory)?;
    if input.dims() != memory.dims() {
        return Err(Error::shape(format!("decoder input {:?} vs memory {:?}", input.dims(), memory.dims())));
    }
    let attended = params.attend(input, memory)?;
    params.residual_stack(input, &attended)
}

#[derive(Clone, Debug)]
pub struct TfmOutput {
    pub encoder: Tensor,
    /// `None` for the pure-encoder variant.
    pub decoder: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Tfm {
    pub encoders: Vec<BlockParams>,
    pub decoders: Vec<BlockParams>,
}

impl Tfm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, config: &TfmConfig) -> Result<Self> {
        config.validate()?;
        let encoders = (0..config.blocks)
            .map(|s| BlockParams::new(store, &format!("{name}.encoder.{s}"), dim))
            .collect::<Result<_>>()?;
        let decoders = if config.use_decoder {
            (0..config.blocks)
                .map(|s| BlockParams::new(store, &format!("{name}.decoder.{s}"), dim))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Self { encoders, decoders })
    }

    /// `encoder_in` are the guide tokens, `decoder_in` the student tokens.
    pub fn forward(&self, encoder_in: &Tensor, decoder_in: &Tensor) -> Result<TfmOutput> {
        if self.encoders.is_empty() {
            return Err(Error::config("tfm.blocks must be at least 1"));
        }
        if encoder_in.dims() != decoder_in.dims() {
            return Err(Error::shape(format!(
                "token groups disagree: {:?} vs {:?}",
                encoder_in.dims(),
                decoder_in.dims()
            )));
        }
        let mut e = encoder_in.clone();
        for block in &self.encoders {
            e = encoder_block(&e, block)?;
        }
        let decoder = if self.decoders.is_empty() {
            None
        } else {
            let mut d = decoder_in.clone();
            for block in &self.decoders {
                d = decoder_block(&d, &e, block)?;
            }
            Some(d)
        };
        Ok(TfmOutput { encoder: e, decoder })
    }
}
