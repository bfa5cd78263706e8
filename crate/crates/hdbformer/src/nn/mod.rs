//! Neural building blocks: the trainable-parameter registry, weight
//! initialization, layer structs, and the layer vocabulary used by the
//! analytic cost model.

pub mod functional;
mod spec;

pub use spec::LayerSpec;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weight initialization schemes. All draws come from the store's seeded rng
/// in registration order, so a given seed reproduces the model bit for bit.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    KaimingUniform { fan_in: usize },
    Zeros,
    Ones,
}

/// Named registry of trainable tensors: the single source of truth for the
/// parameter count, the optimizer, and checkpoints. Iteration order is
/// registration order and therefore deterministic.
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
    rng: ChaCha8Rng,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> ParamStore {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Create and register a trainable tensor. Names must be unique.
    pub fn register(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::KaimingUniform { fan_in } => {
                let bound = 1.0 / (fan_in as f32).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..bound)).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        let t = Tensor::from_vec(shape, data)?.with_requires_grad();
        t.set_label(name);
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), t.clone()));
        Ok(t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count over all entries.
    pub fn total_params(&self) -> u64 {
        self.entries.iter().map(|(_, t)| t.numel() as u64).sum()
    }

    /// Total over entries whose name starts with `prefix`.
    pub fn params_with_prefix(&self, prefix: &str) -> u64 {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel() as u64)
            .sum()
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }
}

/// Dense k×k convolution layer.
pub struct Conv2d {
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Conv2d> {
        if k % 2 == 0 && pad == k / 2 {
            return Err(Error::Config(format!(
                "conv `{name}`: even kernel {k} cannot be same-padded"
            )));
        }
        let w = store.register(
            &format!("{name}.weight"),
            &[cout, cin, k, k],
            Init::KaimingUniform { fan_in: cin * k * k },
        )?;
        let b = store.register(&format!("{name}.bias"), &[cout], Init::Zeros)?;
        Ok(Conv2d { w, b, stride, pad })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        functional::conv2d(x, &self.w, &self.b, self.stride, self.pad)
    }
}

/// Depthwise 3×3 (or k×k) convolution layer, stride 1, same padding.
pub struct DwConv2d {
    pub w: Tensor,
    pub b: Tensor,
    pub pad: usize,
}

impl DwConv2d {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, k: usize) -> Result<DwConv2d> {
        if k % 2 == 0 {
            return Err(Error::Config(format!(
                "depthwise conv `{name}`: kernel must be odd, got {k}"
            )));
        }
        let w = store.register(
            &format!("{name}.weight"),
            &[c, 1, k, k],
            Init::KaimingUniform { fan_in: k * k },
        )?;
        let b = store.register(&format!("{name}.bias"), &[c], Init::Zeros)?;
        Ok(DwConv2d { w, b, pad: k / 2 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        functional::depthwise_conv2d(x, &self.w, &self.b, self.pad)
    }
}

/// 1×1 pointwise convolution layer.
pub struct PwConv2d {
    pub w: Tensor,
    pub b: Tensor,
}

impl PwConv2d {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<PwConv2d> {
        let w = store.register(
            &format!("{name}.weight"),
            &[cout, cin, 1, 1],
            Init::KaimingUniform { fan_in: cin },
        )?;
        let b = store.register(&format!("{name}.bias"), &[cout], Init::Zeros)?;
        Ok(PwConv2d { w, b })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        functional::pointwise_conv2d(x, &self.w, &self.b)
    }
}

/// Affine map over the last axis.
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize) -> Result<Linear> {
        let w = store.register(
            &format!("{name}.weight"),
            &[din, dout],
            Init::KaimingUniform { fan_in: din },
        )?;
        let b = store.register(&format!("{name}.bias"), &[dout], Init::Zeros)?;
        Ok(Linear { w, b })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        functional::linear(x, &self.w, &self.b)
    }
}

/// LayerNorm parameters over a channel extent.
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<LayerNorm> {
        let gamma = store.register(&format!("{name}.gamma"), &[c], Init::Ones)?;
        let beta = store.register(&format!("{name}.beta"), &[c], Init::Zeros)?;
        Ok(LayerNorm { gamma, beta })
    }

    /// Normalize the last axis of a token tensor.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        functional::layernorm(x, &self.gamma, &self.beta)
    }

    /// Normalize the channel axis of an N×C×H×W map.
    pub fn forward_nchw(&self, x: &Tensor) -> Result<Tensor> {
        functional::layernorm_nchw(x, &self.gamma, &self.beta)
    }
}

#[cfg(test)]
mod tests;
