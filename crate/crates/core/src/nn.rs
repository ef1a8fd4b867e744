//! Parameterized layers. Each layer registers its tensors in a [`ParamStore`] at
//! construction and keeps only their key names.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::math;
use crate::params::{kaiming_normal, xavier_uniform, ParamStore};
use crate::tensor::Tensor;

/// Weight initialization for a [`Linear`] layer.
#[derive(Clone, Copy, Debug)]
pub enum LinearInit {
    Xavier,
    /// He-normal on fan-in.
    Kaiming,
    /// Zero weight; bias filled with the given value.
    Zeros(f64),
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        init: LinearInit,
    ) -> Result<Self> {
        let (w, b) = match init {
            LinearInit::Xavier => (
                xavier_uniform(&[out_dim, in_dim], in_dim, out_dim, rng),
                Tensor::zeros(&[out_dim]),
            ),
            LinearInit::Kaiming => (
                kaiming_normal(&[out_dim, in_dim], in_dim, rng),
                Tensor::zeros(&[out_dim]),
            ),
            LinearInit::Zeros(bias) => (Tensor::zeros(&[out_dim, in_dim]), Tensor::full(&[out_dim], bias)),
        };
        Self::from_tensors(store, prefix, w, b)
    }

    /// Registers explicit weight `[out, in]` and bias `[out]` tensors.
    pub fn from_tensors(store: &mut ParamStore, prefix: &str, w: Tensor, b: Tensor) -> Result<Self> {
        let (out_dim, in_dim) = w.dims2()?;
        let weight = format!("{prefix}.weight");
        let bias = format!("{prefix}.bias");
        store.insert(&weight, w, true)?;
        store.insert(&bias, b, true)?;
        Ok(Self {
            weight,
            bias: Some(bias),
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &Graph<'_>, x: &Var) -> Result<Var> {
        let w = g.param(&self.weight)?;
        let b = self.bias.as_deref().map(|b| g.param(b)).transpose()?;
        g.linear(x, &w, b.as_ref())
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: String,
    pub bias: Option<String>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-normal initialized convolution; `zero_init` starts the weight at zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        zero_init: bool,
    ) -> Result<Self> {
        let shape = [out_channels, in_channels, kernel, kernel];
        let w = if zero_init {
            Tensor::zeros(&shape)
        } else {
            kaiming_normal(&shape, in_channels * kernel * kernel, rng)
        };
        let weight = format!("{prefix}.weight");
        store.insert(&weight, w, true)?;
        let bias = if bias {
            let name = format!("{prefix}.bias");
            store.insert(&name, Tensor::zeros(&[out_channels]), true)?;
            Some(name)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
        })
    }

    pub fn forward(&self, g: &Graph<'_>, x: &Var) -> Result<Var> {
        let w = g.param(&self.weight)?;
        let b = self.bias.as_deref().map(|b| g.param(b)).transpose()?;
        g.conv2d(x, &w, b.as_ref(), self.stride, self.pad)
    }
}

/// Batch normalization with frozen statistics: a fixed per-channel affine map.
#[derive(Clone, Debug)]
pub struct FrozenBatchNorm {
    prefix: String,
    eps: f64,
}

impl FrozenBatchNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        store.insert(&format!("{prefix}.weight"), Tensor::full(&[channels], 1.0), false)?;
        store.insert(&format!("{prefix}.bias"), Tensor::zeros(&[channels]), false)?;
        store.insert(&format!("{prefix}.running_mean"), Tensor::zeros(&[channels]), false)?;
        store.insert(&format!("{prefix}.running_var"), Tensor::full(&[channels], 1.0), false)?;
        Ok(Self {
            prefix: prefix.into(),
            eps: 1e-5,
        })
    }

    pub fn forward(&self, g: &Graph<'_>, x: &Var) -> Result<Var> {
        let p = &self.prefix;
        let w = g.param(&format!("{p}.weight"))?;
        let b = g.param(&format!("{p}.bias"))?;
        let rm = g.param(&format!("{p}.running_mean"))?;
        let rv = g.param(&format!("{p}.running_var"))?;
        let (scale, shift): (Vec<f64>, Vec<f64>) = w
            .value()
            .data()
            .iter()
            .zip(b.value().data())
            .zip(rm.value().data().iter().zip(rv.value().data()))
            .map(|((w, b), (m, v))| {
                let s = w / math::sqrt(v + self.eps);
                (s, b - m * s)
            })
            .unzip();
        if scale.iter().all(|&s| s == 1.0) && shift.iter().all(|&s| s == 0.0) {
            return Ok(x.clone());
        }
        let c = scale.len();
        let x = g.scale_channels(x, &Var::constant(Tensor::from_vec(&[c], scale)))?;
        g.add_channel_bias(&x, &Var::constant(Tensor::from_vec(&[c], shift)))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        let gamma = format!("{prefix}.weight");
        let beta = format!("{prefix}.bias");
        store.insert(&gamma, Tensor::full(&[dim], 1.0), true)?;
        store.insert(&beta, Tensor::zeros(&[dim]), true)?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, g: &Graph<'_>, x: &Var) -> Result<Var> {
        g.layer_norm(x, &g.param(&self.gamma)?, &g.param(&self.beta)?, 1e-5)
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        dims: &[usize],
        last_init: LinearInit,
    ) -> Result<Self> {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let init = if i + 1 == n { last_init } else { LinearInit::Xavier };
                Linear::new(store, rng, &format!("{prefix}.layers.{i}"), dims[i], dims[i + 1], init)
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &Graph<'_>, x: &Var) -> Result<Var> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, &h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(&h);
            }
        }
        Ok(h)
    }
}
