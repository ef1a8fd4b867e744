//! Deformable encoder over multi-scale tokens and the query decoder with its
//! class and box heads.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::deform_attn::{LevelShapes, MsDeformAttn, ReferencePoints};
use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::math;
use crate::nn::{LayerNorm, Linear, LinearInit, Mlp};
use crate::params::{normal, ParamStore};
use crate::tensor::Tensor;

/// Class bias giving an initial foreground probability of 0.01.
pub const CLASS_PRIOR_BIAS: f64 = -4.59511985013459;

/// Smallest distance of a predicted box coordinate from 0 or 1.
pub const BOX_EPS: f64 = 1e-9;

/// `d → d_ffn → d` with a ReLU in between.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub linear1: Linear,
    pub linear2: Linear,
    dropout: f64,
}

impl Ffn {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize, d_ffn: usize, dropout: f64) -> Result<Self> {
        Ok(Self {
            linear1: Linear::new(store, rng, &format!("{prefix}.linear1"), d, d_ffn, LinearInit::Xavier)?,
            linear2: Linear::new(store, rng, &format!("{prefix}.linear2"), d_ffn, d, LinearInit::Xavier)?,
            dropout,
        })
    }

    pub fn forward(&self, g: &Graph<'_>, x: &Var) -> Result<Var> {
        let h = g.relu(&self.linear1.forward(g, x)?);
        let h = g.dropout(&h, self.dropout);
        self.linear2.forward(g, &h)
    }
}

/// Per-token reference points for the encoder: the center of the token's own
/// cell, `((j + 0.5)/W_l, (i + 0.5)/H_l)`, repeated for every level. `[N, L, 2]`.
pub fn encoder_reference_points(shapes: &LevelShapes) -> Tensor {
    let levels = shapes.len();
    let mut data = Vec::with_capacity(shapes.total() * levels * 2);
    for &(h, w) in &shapes.shapes {
        for i in 0..h {
            for j in 0..w {
                let (x, y) = ((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64);
                for _ in 0..levels {
                    data.push(x);
                    data.push(y);
                }
            }
        }
    }
    Tensor::from_vec(&[shapes.total(), levels, 2], data)
}

/// Fraction of each level's width and height covered by content, `(x, y)`.
pub fn valid_ratios(shapes: &LevelShapes, padding: &[bool]) -> Vec<(f64, f64)> {
    shapes
        .shapes
        .iter()
        .zip(shapes.starts())
        .map(|(&(h, w), s)| {
            let m = &padding[s..s + h * w];
            let valid_h = (0..h).filter(|&i| !m[i * w]).count();
            let valid_w = (0..w).filter(|&j| !m[j]).count();
            (valid_w as f64 / w as f64, valid_h as f64 / h as f64)
        })
        .collect()
}

impl Graph<'_> {
    /// `[Q, 2]` points scaled per level by `ratios`, giving `[Q, L, 2]`.
    pub fn expand_levels(&self, refs: &Var, ratios: &[(f64, f64)]) -> Result<Var> {
        let (q, two) = refs.value().dims2()?;
        if two != 2 {
            bail!(Shape, "expand_levels needs [Q, 2], got {:?}", refs.shape());
        }
        let l = ratios.len();
        let src = refs.value().data();
        let mut out = Vec::with_capacity(q * l * 2);
        for qi in 0..q {
            for &(rx, ry) in ratios {
                out.push(src[qi * 2] * rx);
                out.push(src[qi * 2 + 1] * ry);
            }
        }
        let ratios = ratios.to_vec();
        Ok(self.op(Tensor::from_vec(&[q, l, 2], out), &[refs], move |g, _| {
            let mut acc = vec![0.0; q * 2];
            for qi in 0..q {
                for (li, &(rx, ry)) in ratios.iter().enumerate() {
                    acc[qi * 2] += g.data()[(qi * l + li) * 2] * rx;
                    acc[qi * 2 + 1] += g.data()[(qi * l + li) * 2 + 1] * ry;
                }
            }
            vec![Some(Tensor::from_vec(&[q, 2], acc))]
        }))
    }

    /// `sigmoid(delta + [logit(ref), 0, 0])` for `delta [Q, 4]` and `ref [Q, 2]`,
    /// kept at least [`BOX_EPS`] away from 0 and 1.
    pub fn boxes_from_deltas(&self, delta: &Var, refs: &Var) -> Result<Var> {
        let (q, four) = delta.value().dims2()?;
        if four != 4 || refs.shape() != [q, 2] {
            bail!(Shape, "box deltas {:?} and references {:?}", delta.shape(), refs.shape());
        }
        let eps = 1e-5;
        let logit = |p: f64| {
            let p = p.clamp(0.0, 1.0);
            math::ln(p.max(eps) / (1.0 - p).max(eps))
        };
        let (dd, rd) = (delta.value().data(), refs.value().data());
        let out: Vec<f64> = (0..q * 4)
            .map(|i| {
                let (r, c) = (i / 4, i % 4);
                let shift = if c < 2 { logit(rd[r * 2 + c]) } else { 0.0 };
                math::sigmoid(dd[i] + shift).clamp(BOX_EPS, 1.0 - BOX_EPS)
            })
            .collect();
        let y = alloc::rc::Rc::new(Tensor::from_vec(&[q, 4], out));
        let rr = refs.rc();
        Ok(self.op((*y).clone(), &[delta, refs], move |g, needs| {
            let gd: Vec<f64> = g.data().iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
            let gr = needs[1].then(|| {
                let mut acc = vec![0.0; q * 2];
                for r in 0..q {
                    for c in 0..2 {
                        let p = rr.data()[r * 2 + c];
                        // clamped region of the logit is flat
                        if p > eps && p < 1.0 - eps {
                            acc[r * 2 + c] = gd[r * 4 + c] / (p * (1.0 - p));
                        }
                    }
                }
                Tensor::from_vec(&[q, 2], acc)
            });
            vec![needs[0].then(|| Tensor::from_vec(&[q, 4], gd)), gr]
        }))
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MsDeformAttn,
    pub norm1: LayerNorm,
    pub ffn: Ffn,
    pub norm2: LayerNorm,
    dropout: f64,
}

impl EncoderLayer {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, config: &ModelConfig) -> Result<Self> {
        let d = config.d_model;
        Ok(Self {
            attn: MsDeformAttn::new(
                store,
                rng,
                &format!("{prefix}.self_attn"),
                d,
                config.attn.heads,
                config.attn.levels,
                config.attn.points,
            )?,
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), d)?,
            ffn: Ffn::new(store, rng, &format!("{prefix}.ffn"), d, config.d_ffn, config.dropout)?,
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), d)?,
            dropout: config.dropout,
        })
    }

    /// Returns the activations after both Add&Norm steps.
    fn forward(
        &self,
        g: &Graph<'_>,
        src: &Var,
        pos: Option<&Var>,
        refs: &ReferencePoints,
        shapes: &LevelShapes,
        padding: &[bool],
    ) -> Result<(Var, Var)> {
        let query = match pos {
            Some(p) => g.add(src, p)?,
            None => src.clone(),
        };
        let attended = self.attn.forward(g, &query, refs, src, shapes, padding)?;
        let x = self.norm1.forward(g, &g.add(src, &g.dropout(&attended, self.dropout))?)?;
        let y = self.ffn.forward(g, &x)?;
        let y = self.norm2.forward(g, &g.add(&x, &g.dropout(&y, self.dropout))?)?;
        Ok((x, y))
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: &ModelConfig) -> Result<Self> {
        let layers = (0..config.enc.layers)
            .map(|i| EncoderLayer::new(store, rng, &format!("transformer.encoder.layers.{i}"), config))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// `[N, d]` tokens with optional position encodings to `[N, d]` memory.
    pub fn forward(&self, g: &Graph<'_>, src: &Var, pos: Option<&Var>, shapes: &LevelShapes, padding: &[bool]) -> Result<Var> {
        Ok(self.forward_traced(g, src, pos, shapes, padding)?.0)
    }

    /// Like [`Encoder::forward`], also returning every post-norm activation.
    pub fn forward_traced(
        &self,
        g: &Graph<'_>,
        src: &Var,
        pos: Option<&Var>,
        shapes: &LevelShapes,
        padding: &[bool],
    ) -> Result<(Var, Vec<Var>)> {
        if src.value().dims2()?.0 != shapes.total() {
            bail!(Shape, "encoder input {:?} does not cover {} tokens", src.shape(), shapes.total());
        }
        let refs = ReferencePoints::new(Var::constant(encoder_reference_points(shapes)))?;
        let mut x = src.clone();
        let mut trace = Vec::with_capacity(self.layers.len() * 2);
        for layer in &self.layers {
            let (mid, out) = layer.forward(g, &x, pos, &refs, shapes, padding)?;
            trace.push(mid);
            trace.push(out.clone());
            x = out;
        }
        Ok((x, trace))
    }
}

/// Standard multi-head attention with separate projections.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize, heads: usize) -> Result<Self> {
        let lin = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str| {
            Linear::new(store, rng, &format!("{prefix}.{name}"), d, d, LinearInit::Xavier)
        };
        Ok(Self {
            q_proj: lin(store, rng, "q_proj")?,
            k_proj: lin(store, rng, "k_proj")?,
            v_proj: lin(store, rng, "v_proj")?,
            out_proj: lin(store, rng, "out_proj")?,
            heads,
        })
    }

    pub fn forward(&self, g: &Graph<'_>, qk: &Var, v: &Var) -> Result<Var> {
        let q = self.q_proj.forward(g, qk)?;
        let k = self.k_proj.forward(g, qk)?;
        let v = self.v_proj.forward(g, v)?;
        let a = g.scaled_dot_attention(&q, &k, &v, self.heads)?;
        self.out_proj.forward(g, &a)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: SelfAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MsDeformAttn,
    pub norm2: LayerNorm,
    pub ffn: Ffn,
    pub norm3: LayerNorm,
    dropout: f64,
}

impl DecoderLayer {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, config: &ModelConfig) -> Result<Self> {
        let d = config.d_model;
        Ok(Self {
            self_attn: SelfAttention::new(store, rng, &format!("{prefix}.self_attn"), d, config.attn.heads)?,
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), d)?,
            cross_attn: MsDeformAttn::new(
                store,
                rng,
                &format!("{prefix}.cross_attn"),
                d,
                config.attn.heads,
                config.attn.levels,
                config.attn.points,
            )?,
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), d)?,
            ffn: Ffn::new(store, rng, &format!("{prefix}.ffn"), d, config.d_ffn, config.dropout)?,
            norm3: LayerNorm::new(store, &format!("{prefix}.norm3"), d)?,
            dropout: config.dropout,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        g: &Graph<'_>,
        tgt: &Var,
        query_pos: &Var,
        refs: &ReferencePoints,
        memory: &Var,
        shapes: &LevelShapes,
        padding: &[bool],
    ) -> Result<Var> {
        let qk = g.add(tgt, query_pos)?;
        let s = self.self_attn.forward(g, &qk, tgt)?;
        let x = self.norm1.forward(g, &g.add(tgt, &g.dropout(&s, self.dropout))?)?;
        let q = g.add(&x, query_pos)?;
        let c = self.cross_attn.forward(g, &q, refs, memory, shapes, padding)?;
        let x = self.norm2.forward(g, &g.add(&x, &g.dropout(&c, self.dropout))?)?;
        let f = self.ffn.forward(g, &x)?;
        self.norm3.forward(g, &g.add(&x, &g.dropout(&f, self.dropout))?)
    }
}

/// Class logits `[Q, C]` and boxes `[Q, 4]` as normalized `(cx, cy, w, h)`.
#[derive(Clone, Debug)]
pub struct LayerPrediction {
    pub logits: Var,
    pub boxes: Var,
}

/// One prediction per decoder layer, last layer last.
#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub layers: Vec<LayerPrediction>,
    /// Decoder reference points `[Q, 2]`.
    pub reference: Var,
}

impl DecoderOutput {
    pub fn last(&self) -> &LayerPrediction {
        self.layers.last().expect("decoder has at least one layer")
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    pub query_embed: alloc::string::String,
    pub reference_points: Linear,
    pub class_embed: Linear,
    pub bbox_embed: Mlp,
    pub num_queries: usize,
    d_model: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: &ModelConfig) -> Result<Self> {
        let d = config.d_model;
        let layers = (0..config.dec.layers)
            .map(|i| DecoderLayer::new(store, rng, &format!("transformer.decoder.layers.{i}"), config))
            .collect::<Result<_>>()?;
        let query_embed = alloc::string::String::from("transformer.query_embed");
        // positional half first, content half second
        store.insert(&query_embed, normal(&[config.num_queries, 2 * d], 1.0, rng), true)?;
        let reference_points = Linear::new(store, rng, "transformer.reference_points", d, 2, LinearInit::Xavier)?;
        let class_embed = Linear::new(store, rng, "class_embed", d, config.num_classes, LinearInit::Xavier)?;
        store.set("class_embed.bias", Tensor::full(&[config.num_classes], CLASS_PRIOR_BIAS))?;
        let bbox_embed = Mlp::new(store, rng, "bbox_embed", &[d, d, d, 4], LinearInit::Zeros(0.0))?;
        store.set("bbox_embed.layers.2.bias", Tensor::from_vec(&[4], vec![0.0, 0.0, -2.0, -2.0]))?;
        Ok(Self {
            layers,
            query_embed,
            reference_points,
            class_embed,
            bbox_embed,
            num_queries: config.num_queries,
            d_model: d,
        })
    }

    /// Runs every layer over `[N, d]` memory; `ratios` are the per-level
    /// content fractions from [`valid_ratios`].
    pub fn forward(
        &self,
        g: &Graph<'_>,
        memory: &Var,
        shapes: &LevelShapes,
        padding: &[bool],
        ratios: &[(f64, f64)],
    ) -> Result<DecoderOutput> {
        if !memory.value().is_finite() {
            bail!(Validation, "decoder memory contains non-finite values");
        }
        let d = self.d_model;
        let embed = g.param(&self.query_embed)?;
        let query_pos = g.slice_cols(&embed, 0, d)?;
        let mut tgt = g.slice_cols(&embed, d, 2 * d)?;
        let reference = g.sigmoid(&self.reference_points.forward(g, &query_pos)?);
        let refs = ReferencePoints::new(g.expand_levels(&reference, ratios)?)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            tgt = layer.forward(g, &tgt, &query_pos, &refs, memory, shapes, padding)?;
            let logits = self.class_embed.forward(g, &tgt)?;
            let delta = self.bbox_embed.forward(g, &tgt)?;
            let boxes = g.boxes_from_deltas(&delta, &reference)?;
            layers.push(LayerPrediction { logits, boxes });
        }
        Ok(DecoderOutput { layers, reference })
    }
}

#[cfg(test)]
mod tests;
