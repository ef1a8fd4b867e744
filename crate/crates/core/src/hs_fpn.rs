//! High-level screening feature pyramid.
//!
//! Feature selection: every backbone level is gated per channel by channel
//! attention (global average + max pooling through a shared transform and a
//! sigmoid) and projected to `d_model` channels by a 1×1 convolution.
//!
//! Feature fusion runs top-down. For each lower level the fused level above is
//! brought to its grid (`f_att`, transposed convolution then bilinear resize, or
//! bilinear resize only), channel attention computed from `f_att` gates the low
//! level, and the gated map is added to `f_att`:
//! `f_out = f_low ⊙ CA(f_att) + f_att`.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackboneOutput, Level};
use crate::config::{FpnConfig, FusionMode};
use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, Linear, LinearInit};
use crate::params::{kaiming_normal, ParamStore};
use crate::tensor::Tensor;

/// Transform shared by the average- and max-pooled channel descriptors.
#[derive(Clone, Debug)]
pub enum SharedTransform {
    /// `C → C/r → C` with a ReLU in between.
    Bottleneck { reduce: Linear, expand: Linear },
    /// Pass-through; pooled statistics go straight to the sigmoid.
    Identity,
}

#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub transform: SharedTransform,
    pub channels: usize,
}

impl ChannelAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        let hidden = (channels / reduction).max(1);
        let reduce = Linear::new(store, rng, &format!("{prefix}.fc1"), channels, hidden, LinearInit::Kaiming)?;
        let expand = Linear::new(store, rng, &format!("{prefix}.fc2"), hidden, channels, LinearInit::Xavier)?;
        Ok(Self {
            transform: SharedTransform::Bottleneck { reduce, expand },
            channels,
        })
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            transform: SharedTransform::Identity,
            channels,
        }
    }

    fn apply_transform(&self, g: &Graph<'_>, v: &Var) -> Result<Var> {
        match &self.transform {
            SharedTransform::Identity => Ok(v.clone()),
            SharedTransform::Bottleneck { reduce, expand } => {
                let row = g.reshape(v, &[1, self.channels])?;
                let h = g.relu(&reduce.forward(g, &row)?);
                let out = expand.forward(g, &h)?;
                g.reshape(&out, &[self.channels])
            }
        }
    }

    /// Channel weights in `(0, 1)` for a `[C, H, W]` map; padded cells are
    /// excluded from both poolings.
    pub fn weights(&self, g: &Graph<'_>, f: &Var, mask: Option<&[bool]>) -> Result<Var> {
        let c = f.value().dims3()?.0;
        if c != self.channels {
            bail!(Shape, "channel attention built for {} channels, got {c}", self.channels);
        }
        let avg = g.masked_avg_pool(f, mask)?;
        let max = g.masked_max_pool(f, mask)?;
        let a = self.apply_transform(g, &avg)?;
        let m = self.apply_transform(g, &max)?;
        Ok(g.sigmoid(&g.add(&a, &m)?))
    }
}

/// 1×1 projection of one pyramid level to the common channel width.
#[derive(Clone, Debug)]
pub struct DimensionMatch {
    pub conv: Conv2d,
}

impl DimensionMatch {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        let conv = Conv2d::new(store, rng, prefix, in_ch, out_ch, 1, 1, true, false)?;
        Ok(Self { conv })
    }

    pub fn forward(&self, g: &Graph<'_>, f: &Var) -> Result<Var> {
        let c = f.value().dims3()?.0;
        if c != self.conv.in_channels {
            bail!(
                Config,
                "dimension match expects {} input channels, got {c}",
                self.conv.in_channels
            );
        }
        self.conv.forward(g, f)
    }
}

/// Intermediate results of one selective fusion step.
#[derive(Clone, Debug)]
pub struct FusionParts {
    /// High-level features on the low-level grid.
    pub attended: Var,
    /// Channel gates computed from `attended`.
    pub gates: Var,
    pub fused: Var,
}

/// Selective feature fusion of a high-level map into a low-level map.
#[derive(Clone, Debug)]
pub struct SelectiveFusion {
    pub mode: FusionMode,
    tconv_weight: Option<alloc::string::String>,
    tconv_bias: Option<alloc::string::String>,
    pub attention: ChannelAttention,
}

impl SelectiveFusion {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        channels: usize,
        config: &FpnConfig,
    ) -> Result<Self> {
        let (tconv_weight, tconv_bias) = match config.mode {
            FusionMode::TconvBl => {
                let w = format!("{prefix}.tconv.weight");
                let b = format!("{prefix}.tconv.bias");
                store.insert(&w, kaiming_normal(&[channels, channels, 3, 3], channels * 9, rng), true)?;
                store.insert(&b, Tensor::zeros(&[channels]), true)?;
                (Some(w), Some(b))
            }
            FusionMode::Bl => (None, None),
        };
        let attention = ChannelAttention::new(store, rng, &format!("{prefix}.ca"), channels, config.ca_reduction)?;
        Ok(Self {
            mode: config.mode,
            tconv_weight,
            tconv_bias,
            attention,
        })
    }

    /// `f_att = BL(T-Conv(f_high))` on the grid of `f_low` (or `BL(f_high)` in
    /// bilinear-only mode), then `f_out = f_low ⊙ CA(f_att) + f_att`.
    pub fn fuse(&self, g: &Graph<'_>, high: &Var, low: &Var, low_mask: Option<&[bool]>) -> Result<FusionParts> {
        let (ch, _, _) = high.value().dims3()?;
        let (cl, lh, lw) = low.value().dims3()?;
        if ch != cl {
            bail!(Validation, "fusion needs equal channel counts, got {ch} and {cl}");
        }
        let up = match (&self.tconv_weight, &self.tconv_bias) {
            (Some(w), Some(b)) => {
                let w = g.param(w)?;
                let b = g.param(b)?;
                g.conv_transpose2d(high, &w, Some(&b), 2, 1, 1)?
            }
            _ => high.clone(),
        };
        let attended = g.resize_bilinear(&up, lh, lw)?;
        let gates = self.attention.weights(g, &attended, low_mask)?;
        let gated = g.scale_channels(low, &gates)?;
        let fused = g.add(&gated, &attended)?;
        Ok(FusionParts {
            attended,
            gates,
            fused,
        })
    }
}

/// Four fused levels of `d_model` channels at strides 8, 16, 32, 64.
#[derive(Clone, Debug)]
pub struct FusedPyramid {
    pub levels: Vec<Level>,
}

#[derive(Clone, Debug)]
pub struct HsFpn {
    pub select: Vec<ChannelAttention>,
    pub project: Vec<DimensionMatch>,
    pub fuse: Vec<SelectiveFusion>,
}

impl HsFpn {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        in_channels: [usize; 4],
        d_model: usize,
        config: &FpnConfig,
    ) -> Result<Self> {
        let mut select = Vec::new();
        let mut project = Vec::new();
        for (i, &c) in in_channels.iter().enumerate() {
            select.push(ChannelAttention::new(store, rng, &format!("fpn.select.{i}"), c, config.ca_reduction)?);
            project.push(DimensionMatch::new(store, rng, &format!("fpn.dm.{i}"), c, d_model)?);
        }
        let fuse = (0..3)
            .map(|i| SelectiveFusion::new(store, rng, &format!("fpn.sff.{i}"), d_model, config))
            .collect::<Result<_>>()?;
        Ok(Self { select, project, fuse })
    }

    /// Channel-gates and projects one level (feature selection).
    pub fn select_level(&self, g: &Graph<'_>, i: usize, level: &Level) -> Result<Var> {
        let gates = self.select[i].weights(g, &level.map, Some(&level.mask))?;
        let screened = g.scale_channels(&level.map, &gates)?;
        self.project[i].forward(g, &screened)
    }

    pub fn build_pyramid(&self, g: &Graph<'_>, input: &BackboneOutput) -> Result<FusedPyramid> {
        if input.levels.len() != 4 {
            bail!(Shape, "pyramid needs 4 backbone levels, got {}", input.levels.len());
        }
        let selected = input
            .levels
            .iter()
            .enumerate()
            .map(|(i, l)| self.select_level(g, i, l))
            .collect::<Result<Vec<_>>>()?;
        let mut fused: Vec<Option<Var>> = alloc::vec![None; 4];
        fused[3] = Some(selected[3].clone());
        for i in (0..3).rev() {
            let high = fused[i + 1].as_ref().expect("coarser level fused first");
            let parts = self.fuse[i].fuse(g, high, &selected[i], Some(&input.levels[i].mask))?;
            fused[i] = Some(parts.fused);
        }
        let levels = fused
            .into_iter()
            .zip(&input.levels)
            .map(|(map, l)| Level {
                map: map.expect("all levels fused"),
                mask: l.mask.clone(),
                stride: l.stride,
            })
            .collect();
        Ok(FusedPyramid { levels })
    }
}
