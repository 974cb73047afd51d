//! Layers and the parameter registry.
//!
//! All parameters live in a [`ParamRegistry`] under dot-separated names
//! (`backbone.decoder.block2.conv.kernel`, `pel.ir.ff.weight`, ...). A frozen
//! entry is both excluded from [`ParamRegistry::trainable`] and marked as not
//! requiring gradients, so it is never a backward leaf and never reaches the
//! optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Param {
    pub tensor: Tensor,
    pub frozen: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamCounts {
    pub total: usize,
    pub trainable: usize,
    pub frozen: usize,
    /// `trainable / total`, zero for an empty registry.
    pub ratio: f64,
}

#[derive(Debug, Default, Clone)]
pub struct ParamRegistry {
    entries: BTreeMap<String, Param>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a new trainable entry and returns its handle.
    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<Tensor> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("parameter {name:?} registered twice")));
        }
        tensor.set_requires_grad(true);
        self.entries.insert(
            name,
            Param {
                tensor: tensor.clone(),
                frozen: false,
            },
        );
        Ok(tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| &p.tensor)
    }

    pub fn is_frozen(&self, name: &str) -> Option<bool> {
        self.entries.get(name).map(|p| p.frozen)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Trainable entries in name order.
    pub fn trainable(&self) -> Vec<(&str, &Tensor)> {
        self.entries
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(k, p)| (k.as_str(), &p.tensor))
            .collect()
    }

    /// Freezes every entry whose name starts with `prefix`. Returns the
    /// number of entries matched; matching nothing is an error.
    pub fn freeze(&mut self, prefix: &str) -> Result<usize> {
        self.set_frozen(prefix, true)
    }

    pub fn unfreeze(&mut self, prefix: &str) -> Result<usize> {
        self.set_frozen(prefix, false)
    }

    fn set_frozen(&mut self, prefix: &str, frozen: bool) -> Result<usize> {
        let mut matched = 0;
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.frozen = frozen;
                p.tensor.set_requires_grad(!frozen);
                p.tensor.zero_grad();
                matched += 1;
            }
        }
        if matched == 0 {
            return Err(Error::Config(format!("no parameter matches prefix {prefix:?}")));
        }
        Ok(matched)
    }

    pub fn zero_grad(&self) {
        self.entries.values().for_each(|p| p.tensor.zero_grad());
    }

    /// Copies of all values, keyed by name.
    pub fn snapshot(&self) -> BTreeMap<String, Vec<f64>> {
        self.entries
            .iter()
            .map(|(k, p)| (k.clone(), p.tensor.to_vec()))
            .collect()
    }

    /// Total scalar count of the entries under `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.tensor.numel())
            .sum()
    }
}

pub fn count_params(reg: &ParamRegistry) -> ParamCounts {
    let mut total = 0;
    let mut trainable = 0;
    for (_, p) in reg.iter() {
        let n = p.tensor.numel();
        total += n;
        if !p.frozen {
            trainable += n;
        }
    }
    let ratio = if total == 0 {
        0.0
    } else {
        trainable as f64 / total as f64
    };
    ParamCounts {
        total,
        trainable,
        frozen: total - trainable,
        ratio,
    }
}

fn glorot<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data).expect("shape product matches")
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng>(
        reg: &mut ParamRegistry,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = reg.register(
            format!("{name}.weight"),
            glorot(rng, &[in_dim, out_dim], in_dim, out_dim),
        )?;
        let bias = reg.register(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?;
        Ok(Self { weight, bias })
    }

    /// A layer whose weight and bias start at zero.
    pub fn zeroed(reg: &mut ParamRegistry, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = reg.register(format!("{name}.weight"), Tensor::zeros(&[in_dim, out_dim]))?;
        let bias = reg.register(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?;
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// `x · W + b` per frame.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add_row(&self.bias)
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl Conv1d {
    pub fn new<R: Rng>(
        reg: &mut ParamRegistry,
        name: &str,
        width: usize,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if width % 2 == 0 {
            return Err(Error::Config(format!("conv width must be odd, got {width}")));
        }
        let kernel = reg.register(
            format!("{name}.kernel"),
            glorot(rng, &[width, c_in, c_out], width * c_in, c_out),
        )?;
        let bias = reg.register(format!("{name}.bias"), Tensor::zeros(&[c_out]))?;
        Ok(Self { kernel, bias })
    }

    pub fn zeroed(
        reg: &mut ParamRegistry,
        name: &str,
        width: usize,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        if width % 2 == 0 {
            return Err(Error::Config(format!("conv width must be odd, got {width}")));
        }
        let kernel = reg.register(format!("{name}.kernel"), Tensor::zeros(&[width, c_in, c_out]))?;
        let bias = reg.register(format!("{name}.bias"), Tensor::zeros(&[c_out]))?;
        Ok(Self { kernel, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv1d(&self.kernel)?.add_row(&self.bias)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub offset: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(reg: &mut ParamRegistry, name: &str, dim: usize) -> Result<Self> {
        let gain = reg.register(format!("{name}.gain"), Tensor::full(&[dim], 1.0))?;
        let offset = reg.register(format!("{name}.offset"), Tensor::zeros(&[dim]))?;
        Ok(Self {
            gain,
            offset,
            eps: LAYER_NORM_EPS,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gain, &self.offset, self.eps)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: Tensor,
}

impl Embedding {
    pub fn new<R: Rng>(
        reg: &mut ParamRegistry,
        name: &str,
        rows: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let data = (0..rows * dim).map(|_| normal.sample(rng)).collect();
        let table = reg.register(format!("{name}.table"), Tensor::from_vec(&[rows, dim], data)?)?;
        Ok(Self { table })
    }

    pub fn forward(&self, indices: &[usize]) -> Result<Tensor> {
        self.table.gather_rows(indices)
    }
}
