//! Multi-scale fusion necks selectable by `fpn.variant`.
//!
//! `hsfpn` is the screening pyramid of [`crate::hs_fpn`]. `fpn`, `pafpn` and
//! `bifpn` are compact comparison necks (single top-down pass, plus a
//! bottom-up pass for PaFPN, softmax-weighted two-way fusion for BiFPN).
//! `fapn` needs deformable alignment convolutions and is not provided.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackboneOutput, Level};
use crate::config::{FpnConfig, FpnVariant};
use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::hs_fpn::{FusedPyramid, HsFpn};
use crate::nn::Conv2d;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub enum Neck {
    Hs(HsFpn),
    Plain(PlainFpn),
}

impl Neck {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        in_channels: [usize; 4],
        d_model: usize,
        config: &FpnConfig,
    ) -> Result<Self> {
        match config.variant {
            FpnVariant::Hsfpn => Ok(Neck::Hs(HsFpn::new(store, rng, in_channels, d_model, config)?)),
            FpnVariant::Fpn | FpnVariant::Pafpn | FpnVariant::Bifpn => Ok(Neck::Plain(PlainFpn::new(
                store,
                rng,
                in_channels,
                d_model,
                config.variant,
            )?)),
            FpnVariant::Fapn => bail!(Unsupported, "fpn.variant = fapn is not implemented"),
        }
    }

    pub fn forward(&self, g: &Graph<'_>, input: &BackboneOutput) -> Result<FusedPyramid> {
        match self {
            Neck::Hs(n) => n.build_pyramid(g, input),
            Neck::Plain(n) => n.forward(g, input),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PlainFpn {
    variant: FpnVariant,
    lateral: Vec<Conv2d>,
    output: Vec<Conv2d>,
    /// PaFPN / BiFPN bottom-up downsamplers (levels 0..3 → 1..4).
    down: Vec<Conv2d>,
    /// BiFPN fusion logits per node.
    fusion_weights: Vec<String>,
}

impl PlainFpn {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        in_channels: [usize; 4],
        d: usize,
        variant: FpnVariant,
    ) -> Result<Self> {
        let mut lateral = Vec::new();
        let mut output = Vec::new();
        for (i, &c) in in_channels.iter().enumerate() {
            lateral.push(Conv2d::new(store, rng, &format!("fpn.lateral.{i}"), c, d, 1, 1, true, false)?);
            output.push(Conv2d::new(store, rng, &format!("fpn.output.{i}"), d, d, 3, 1, true, false)?);
        }
        let mut down = Vec::new();
        let mut fusion_weights = Vec::new();
        if variant != FpnVariant::Fpn {
            for i in 0..3 {
                down.push(Conv2d::new(store, rng, &format!("fpn.down.{i}"), d, d, 3, 2, true, false)?);
            }
        }
        if variant == FpnVariant::Bifpn {
            // top-down nodes fuse 2 inputs, bottom-up nodes fuse 3 (2 at the top level)
            for (i, n) in [(0usize, 2usize), (1, 2), (2, 2), (3, 3), (4, 3), (5, 2)] {
                let name = format!("fpn.fusion.{i}");
                store.insert(&name, Tensor::zeros(&[n]), true)?;
                fusion_weights.push(name);
            }
        }
        Ok(Self {
            variant,
            lateral,
            output,
            down,
            fusion_weights,
        })
    }

    fn weighted_sum(&self, g: &Graph<'_>, node: usize, inputs: &[&Var]) -> Result<Var> {
        let logits = g.param(&self.fusion_weights[node])?;
        let w = g.softmax_groups(&logits, inputs.len())?;
        let mut acc: Option<Var> = None;
        for (k, x) in inputs.iter().enumerate() {
            let term = g.scale_by(x, &g.pick(&w, k)?)?;
            acc = Some(match acc {
                Some(a) => g.add(&a, &term)?,
                None => term,
            });
        }
        Ok(acc.expect("at least one input"))
    }

    fn forward(&self, g: &Graph<'_>, input: &BackboneOutput) -> Result<FusedPyramid> {
        if input.levels.len() != 4 {
            bail!(Shape, "pyramid needs 4 backbone levels, got {}", input.levels.len());
        }
        let lat = input
            .levels
            .iter()
            .zip(&self.lateral)
            .map(|(l, conv)| conv.forward(g, &l.map))
            .collect::<Result<Vec<_>>>()?;
        let mut td: Vec<Var> = lat.clone();
        for i in (0..3).rev() {
            let (_, h, w) = lat[i].value().dims3()?;
            let up = g.resize_bilinear(&td[i + 1], h, w)?;
            td[i] = if self.variant == FpnVariant::Bifpn {
                self.weighted_sum(g, i, &[&lat[i], &up])?
            } else {
                g.add(&lat[i], &up)?
            };
        }
        let mut out = td.clone();
        match self.variant {
            FpnVariant::Pafpn => {
                for i in 1..4 {
                    let down = self.down_to(g, i - 1, &out[i - 1], &td[i])?;
                    out[i] = g.add(&td[i], &down)?;
                }
            }
            FpnVariant::Bifpn => {
                for i in 1..4 {
                    let down = self.down_to(g, i - 1, &out[i - 1], &td[i])?;
                    out[i] = if i < 3 {
                        self.weighted_sum(g, 2 + i, &[&lat[i], &td[i], &down])?
                    } else {
                        self.weighted_sum(g, 5, &[&td[i], &down])?
                    };
                }
            }
            _ => {}
        }
        let levels = out
            .iter()
            .zip(&self.output)
            .zip(&input.levels)
            .map(|((m, conv), l)| {
                Ok(Level {
                    map: conv.forward(g, m)?,
                    mask: l.mask.clone(),
                    stride: l.stride,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FusedPyramid { levels })
    }

    fn down_to(&self, g: &Graph<'_>, i: usize, x: &Var, target: &Var) -> Result<Var> {
        let (_, h, w) = target.value().dims3()?;
        let d = self.down[i].forward(g, x)?;
        g.resize_bilinear(&d, h, w)
    }
}
