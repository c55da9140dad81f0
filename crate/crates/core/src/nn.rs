//! Small layer primitives built on candle tensors.

use candle_core::{Tensor, Var, D};

use crate::error::Result;
use crate::params::{Init, ParamStore};

/// Affine map over the trailing axis: `(.., in) -> (.., out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        let weight = store.param(format!("{name}.weight"), &[output, input], Init::FanInUniform { fan_in: input })?;
        let bias = store.param(format!("{name}.bias"), &[output], Init::FanInUniform { fan_in: input })?;
        Ok(Self { weight, bias: Some(bias) })
    }

    pub fn zeros(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        let weight = store.param(format!("{name}.weight"), &[output, input], Init::Zeros)?;
        let bias = store.param(format!("{name}.bias"), &[output], Init::Zeros)?;
        Ok(Self { weight, bias: Some(bias) })
    }

    pub fn no_bias(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        let weight = store.param(format!("{name}.weight"), &[output, input], Init::FanInUniform { fan_in: input })?;
        Ok(Self { weight, bias: None })
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let ys = xs.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => ys.broadcast_add(b)?,
            None => ys,
        })
    }

    /// Applies the map along axis 1 of a `(B, in, N)` tensor, i.e. `W·X + b`.
    pub fn forward_columns(&self, xs: &Tensor) -> Result<Tensor> {
        let ys = self.weight.broadcast_matmul(xs)?;
        Ok(match &self.bias {
            Some(b) => ys.broadcast_add(&b.unsqueeze(1)?)?,
            None => ys,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = input * kernel * kernel;
        let weight = store.param(
            format!("{name}.weight"),
            &[output, input, kernel, kernel],
            Init::KaimingNormal { fan_in },
        )?;
        Ok(Self { weight, stride, padding })
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        Ok(xs.conv2d(&self.weight, self.padding, self.stride, 1, 1)?)
    }
}

/// 2-D batch normalization with running statistics held as buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub weight: Tensor,
    pub bias: Tensor,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: store.param(format!("{name}.weight"), &[channels], Init::Ones)?,
            bias: store.param(format!("{name}.bias"), &[channels], Init::Zeros)?,
            running_mean: store.buffer(format!("{name}.running_mean"), &[channels], Init::Zeros)?,
            running_var: store.buffer(format!("{name}.running_var"), &[channels], Init::Ones)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    /// Batch statistics (and a running-stat update) when `train`, running statistics otherwise.
    pub fn forward(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        let c = xs.dim(1)?;
        let (mean, var) = if train {
            let mean = xs.mean_keepdim((0, 2, 3))?;
            let centered = xs.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
            let n = xs.elem_count() / c;
            let unbiased = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.flatten_all()?.detach() * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))?
                + (var.flatten_all()?.detach() * (m * unbiased))?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1, 1))?,
            )
        };
        let normed = xs.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

/// Layer normalization over axis 1 of a `(B, d, N)` tensor (per token column).
#[derive(Clone, Debug)]
pub struct ColumnLayerNorm {
    pub gain: Tensor,
    pub offset: Tensor,
    eps: f64,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl ColumnLayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.param(format!("{name}.gain"), &[dim], Init::Ones)?,
            offset: store.param(format!("{name}.offset"), &[dim], Init::Zeros)?,
            eps: LAYER_NORM_EPS,
        })
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let mean = xs.mean_keepdim(1)?;
        let centered = xs.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.gain.unsqueeze(1)?)?
            .broadcast_add(&self.offset.unsqueeze(1)?)?)
    }
}

/// Numerically stable softmax along `dim`, built from differentiable primitives.
pub fn softmax(xs: &Tensor, dim: usize) -> Result<Tensor> {
    let max = xs.max_keepdim(dim)?.detach();
    let exp = xs.broadcast_sub(&max)?.exp()?;
    let sum = exp.sum_keepdim(dim)?;
    Ok(exp.broadcast_div(&sum)?)
}

/// Softmax over the last axis.
pub fn softmax_last(xs: &Tensor) -> Result<Tensor> {
    let dim = xs.dim(D::Minus1).map(|_| xs.rank() - 1)?;
    softmax(xs, dim)
}
