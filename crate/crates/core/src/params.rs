//! Named, seeded parameter storage.
//!
//! Every learnable tensor lives in a [`ParamStore`] as a [`Var`] keyed by a
//! dotted path (`layer1.0.conv1.weight`). Non-learnable state such as batch
//! normalization running statistics is kept in a separate buffer map so the
//! optimizer never sees it. Initialization draws from a seeded ChaCha stream,
//! so two stores built with the same seed and the same construction order are
//! bit-identical.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±1/sqrt(fan_in)`.
    FanInUniform { fan_in: usize },
    /// Normal with std `sqrt(2/fan_in)`.
    KaimingNormal { fan_in: usize },
}

pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
    prefix: String,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: String::new(),
        }
    }

    /// Prefix prepended to every name registered from now on.
    pub fn set_prefix(&mut self, prefix: impl Into<String>) {
        self.prefix = prefix.into();
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn sample(&mut self, n: usize, init: Init) -> Vec<f64> {
        match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::FanInUniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
            Init::KaimingNormal { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
        }
    }

    fn make(&mut self, shape: &[usize], init: Init) -> Result<Var> {
        let n = shape.iter().product();
        let values = self.sample(n, init);
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }

    /// Registers a learnable tensor and returns a handle sharing its storage.
    pub fn param(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<Tensor> {
        let name = format!("{}{}", self.prefix, name.into());
        if self.params.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter `{name}`")));
        }
        let var = self.make(shape, init)?;
        let t = var.as_tensor().clone();
        self.params.insert(name, var);
        Ok(t)
    }

    /// Registers non-learnable state; returns the variable so callers can update it in place.
    pub fn buffer(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<Var> {
        let name = format!("{}{}", self.prefix, name.into());
        if self.buffers.contains_key(&name) {
            return Err(Error::config(format!("duplicate buffer `{name}`")));
        }
        let var = self.make(shape, init)?;
        self.buffers.insert(name, var.clone());
        Ok(var)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param_var(&self, name: &str) -> Option<&Var> {
        self.params.get(name)
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over names and raw values of every parameter and buffer.
    pub fn checksum(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in self.params.iter().chain(self.buffers.iter()) {
            hasher.update(name.as_bytes());
            let values = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(format!("{:x}", hasher.finalize()))
    }

    /// Copies of every tensor, prefixed by `prefix`, for serialization.
    pub fn export(&self, prefix: &str) -> Result<Vec<(String, Tensor)>> {
        let mut out = Vec::with_capacity(self.params.len() + self.buffers.len());
        for (name, var) in &self.params {
            out.push((format!("{prefix}param.{name}"), var.as_tensor().copy()?));
        }
        for (name, var) in &self.buffers {
            out.push((format!("{prefix}buffer.{name}"), var.as_tensor().copy()?));
        }
        Ok(out)
    }

    /// Overwrites every tensor from `lookup`; all names must be present with matching shapes.
    pub fn import(&self, prefix: &str, lookup: &dyn Fn(&str) -> Option<Tensor>) -> Result<()> {
        let sections = [("param.", &self.params), ("buffer.", &self.buffers)];
        for (section, map) in sections {
            for (name, var) in map.iter() {
                let key = format!("{prefix}{section}{name}");
                let t = lookup(&key).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
                if t.dims() != var.dims() {
                    return Err(Error::Checkpoint(format!(
                        "tensor `{key}` has shape {:?}, expected {:?}",
                        t.dims(),
                        var.dims()
                    )));
                }
                var.set(&t.to_dtype(self.dtype)?)?;
            }
        }
        Ok(())
    }

    /// Loads tensors keyed by their bare names (e.g. a torchvision state dict
    /// converted to safetensors).
    pub fn load_named(&self, tensors: &std::collections::HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.params.iter().chain(self.buffers.iter()) {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("weights file lacks `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "weight `{name}` has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}
