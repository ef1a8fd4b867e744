//! Multi-scale deformable attention.
//!
//! Each query attends to `K` sampled points per head per level. Point `k` of
//! head `h` on level `l` sits at the query's reference point plus a learned
//! offset measured in cells of that level. Values are read by bilinear
//! interpolation (zero outside the grid) and mixed with weights that are
//! softmax-normalized jointly over the `L·K` samples of each head.
//!
//! Sampling convention: normalized `(x, y)` maps to the continuous pixel
//! position `(x·W − 0.5, y·H − 0.5)`, so cell `(i, j)` has its center at
//! `((j + 0.5)/W, (i + 0.5)/H)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::math;
use crate::nn::{Linear, LinearInit};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Grid sizes of the flattened value levels in storage order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelShapes {
    pub shapes: Vec<(usize, usize)>,
}

impl LevelShapes {
    pub fn new(shapes: Vec<(usize, usize)>) -> Self {
        Self { shapes }
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }

    /// First token index of every level.
    pub fn starts(&self) -> Vec<usize> {
        let mut acc = 0;
        self.shapes
            .iter()
            .map(|&(h, w)| {
                let s = acc;
                acc += h * w;
                s
            })
            .collect()
    }

    pub fn total(&self) -> usize {
        self.shapes.iter().map(|&(h, w)| h * w).sum()
    }
}

/// Normalized reference points `[Q, L, 2]` as `(x, y)`.
#[derive(Clone, Debug)]
pub struct ReferencePoints {
    pub coords: Var,
}

impl ReferencePoints {
    pub fn new(coords: Var) -> Result<Self> {
        if coords.shape().len() != 3 || coords.shape()[2] != 2 {
            bail!(Shape, "reference points must be [Q, L, 2], got {:?}", coords.shape());
        }
        if coords.value().data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            bail!(Validation, "reference points must lie in [0, 1]");
        }
        Ok(Self { coords })
    }

    pub fn num_queries(&self) -> usize {
        self.coords.shape()[0]
    }
}

/// Offsets `[Q, H·L·K·2]` in cells and weights `[Q, H·L·K]`, each laid out
/// head-major then level then point.
#[derive(Clone, Debug)]
pub struct SamplingState {
    pub offsets: Var,
    pub weights: Var,
}

/// The four neighbours of a continuous position and their bilinear weights.
/// Neighbours outside the grid are `None`.
struct Corners {
    cells: [Option<usize>; 4],
    weights: [f64; 4],
    /// `∂weight/∂px` and `∂weight/∂py`.
    dx: [f64; 4],
    dy: [f64; 4],
}

fn corners(x: f64, y: f64, h: usize, w: usize) -> Corners {
    let px = x * w as f64 - 0.5;
    let py = y * h as f64 - 0.5;
    let x0 = math::floor(px);
    let y0 = math::floor(py);
    let fx = px - x0;
    let fy = py - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let cell = |i: i64, j: i64| -> Option<usize> {
        (i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w).then(|| i as usize * w + j as usize)
    };
    Corners {
        cells: [cell(y0, x0), cell(y0, x0 + 1), cell(y0 + 1, x0), cell(y0 + 1, x0 + 1)],
        weights: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
        dx: [-(1.0 - fy), 1.0 - fy, -fy, fy],
        dy: [-(1.0 - fx), -fx, 1.0 - fx, fx],
    }
}

/// Bilinear read of a `[C, H, W]` map at normalized `(x, y)`; cells outside the
/// grid count as zero.
pub fn bilinear_sample(map: &Tensor, x: f64, y: f64) -> Result<Vec<f64>> {
    let (c, h, w) = map.dims3()?;
    let mut out = vec![0.0; c];
    if !(x.is_finite() && y.is_finite()) {
        return Ok(out);
    }
    let k = corners(x, y, h, w);
    for (cell, wt) in k.cells.iter().zip(k.weights) {
        if let Some(cell) = cell {
            for (ch, o) in out.iter_mut().enumerate() {
                *o += wt * map.data()[ch * h * w + cell];
            }
        }
    }
    Ok(out)
}

/// Geometry shared by the forward and backward passes of the sampling op.
struct Geometry {
    queries: usize,
    heads: usize,
    levels: usize,
    points: usize,
    head_dim: usize,
    shapes: Vec<(usize, usize)>,
    starts: Vec<usize>,
}

impl Geometry {
    /// Normalized sampling location of `(q, h, l, k)`.
    fn location(&self, refs: &[f64], offsets: &[f64], q: usize, h: usize, l: usize, k: usize) -> (f64, f64) {
        let (lh, lw) = self.shapes[l];
        let r = (q * self.levels + l) * 2;
        let o = self.slot(q, h, l, k) * 2;
        (refs[r] + offsets[o] / lw as f64, refs[r + 1] + offsets[o + 1] / lh as f64)
    }

    fn slot(&self, q: usize, h: usize, l: usize, k: usize) -> usize {
        ((q * self.heads + h) * self.levels + l) * self.points + k
    }
}

impl Graph<'_> {
    /// Deformable sampling core: `[N, d]` values over `shapes`, reference
    /// points `[Q, L, 2]`, offsets `[Q, H·L·K·2]` in cells and normalized
    /// weights `[Q, H·L·K]` give `[Q, d]`, heads concatenated along columns.
    /// Differentiable in values, reference points, offsets and weights.
    #[allow(clippy::too_many_arguments)]
    pub fn deform_sample(
        &self,
        value: &Var,
        shapes: &LevelShapes,
        refs: &Var,
        offsets: &Var,
        weights: &Var,
        heads: usize,
        points: usize,
    ) -> Result<Var> {
        let (n, d) = value.value().dims2()?;
        let levels = shapes.len();
        if n != shapes.total() {
            bail!(Validation, "value has {n} tokens but level shapes cover {}", shapes.total());
        }
        if heads == 0 || d % heads != 0 {
            bail!(Shape, "width {d} does not split into {heads} heads");
        }
        let &[q, rl, two] = refs.shape() else {
            bail!(Shape, "reference points must be [Q, L, 2], got {:?}", refs.shape());
        };
        if rl != levels || two != 2 {
            bail!(Validation, "reference points cover {rl} levels, values have {levels}");
        }
        let per_query = heads * levels * points;
        if offsets.shape() != [q, per_query * 2] {
            bail!(Shape, "offsets must be [{q}, {}], got {:?}", per_query * 2, offsets.shape());
        }
        if weights.shape() != [q, per_query] {
            bail!(Shape, "weights must be [{q}, {per_query}], got {:?}", weights.shape());
        }
        let geo = Geometry {
            queries: q,
            heads,
            levels,
            points,
            head_dim: d / heads,
            shapes: shapes.shapes.clone(),
            starts: shapes.starts(),
        };
        let (rv, rr, ro, rw) = (value.rc(), refs.rc(), offsets.rc(), weights.rc());
        let mut out = vec![0.0; q * d];
        {
            let (vd, rd, od, wd) = (rv.data(), rr.data(), ro.data(), rw.data());
            let dh = geo.head_dim;
            for qi in 0..q {
                for h in 0..heads {
                    let acc = &mut out[qi * d + h * dh..qi * d + (h + 1) * dh];
                    for l in 0..levels {
                        let (lh, lw) = geo.shapes[l];
                        for k in 0..points {
                            let a = wd[geo.slot(qi, h, l, k)];
                            let (x, y) = geo.location(rd, od, qi, h, l, k);
                            if a == 0.0 || !(x.is_finite() && y.is_finite()) {
                                continue;
                            }
                            let c = corners(x, y, lh, lw);
                            for (cell, cw) in c.cells.iter().zip(c.weights) {
                                if let Some(cell) = cell {
                                    let row = &vd[(geo.starts[l] + cell) * d + h * dh..][..dh];
                                    let s = a * cw;
                                    for (o, v) in acc.iter_mut().zip(row) {
                                        *o += s * v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[q, d], out);
        Ok(self.op(out, &[value, refs, offsets, weights], move |g, needs| {
            let (vd, rd, od, wd) = (rv.data(), rr.data(), ro.data(), rw.data());
            let gd = g.data();
            let dh = geo.head_dim;
            let mut gv = vec![0.0; n * d];
            let mut gr = vec![0.0; rd.len()];
            let mut go = vec![0.0; od.len()];
            let mut gw = vec![0.0; wd.len()];
            let want_loc = needs[1] || needs[2];
            for qi in 0..geo.queries {
                for h in 0..geo.heads {
                    let gout = &gd[qi * d + h * dh..][..dh];
                    for l in 0..geo.levels {
                        let (lh, lw) = geo.shapes[l];
                        for k in 0..geo.points {
                            let slot = geo.slot(qi, h, l, k);
                            let a = wd[slot];
                            let (x, y) = geo.location(rd, od, qi, h, l, k);
                            if !(x.is_finite() && y.is_finite()) {
                                continue;
                            }
                            let c = corners(x, y, lh, lw);
                            let (mut dot, mut dpx, mut dpy) = (0.0, 0.0, 0.0);
                            for i in 0..4 {
                                let Some(cell) = c.cells[i] else { continue };
                                let base = (geo.starts[l] + cell) * d + h * dh;
                                let row = &vd[base..base + dh];
                                let gv_dot: f64 = gout.iter().zip(row).map(|(g, v)| g * v).sum();
                                dot += c.weights[i] * gv_dot;
                                dpx += c.dx[i] * gv_dot;
                                dpy += c.dy[i] * gv_dot;
                                if needs[0] && a != 0.0 {
                                    let s = a * c.weights[i];
                                    for (t, gg) in gv[base..base + dh].iter_mut().zip(gout) {
                                        *t += s * gg;
                                    }
                                }
                            }
                            gw[slot] += dot;
                            if want_loc {
                                // px = x·W − 0.5 with x = ref + offset / W
                                let gx = a * dpx * lw as f64;
                                let gy = a * dpy * lh as f64;
                                let r = (qi * geo.levels + l) * 2;
                                gr[r] += gx;
                                gr[r + 1] += gy;
                                go[slot * 2] += gx / lw as f64;
                                go[slot * 2 + 1] += gy / lh as f64;
                            }
                        }
                    }
                }
            }
            vec![
                needs[0].then(|| Tensor::from_vec(&[n, d], gv)),
                needs[1].then(|| Tensor::from_vec(rr.shape(), gr)),
                needs[2].then(|| Tensor::from_vec(ro.shape(), go)),
                needs[3].then(|| Tensor::from_vec(rw.shape(), gw)),
            ]
        }))
    }
}

/// Radial start pattern: point `k` of head `h` sits `k + 1` cells from the
/// reference point at angle `2πh/H`, identical on every level.
pub fn radial_offset_bias(heads: usize, levels: usize, points: usize) -> Tensor {
    let mut b = Vec::with_capacity(heads * levels * points * 2);
    for h in 0..heads {
        let theta = 2.0 * core::f64::consts::PI * h as f64 / heads as f64;
        let (s, c) = (math::sin(theta), math::cos(theta));
        for _ in 0..levels {
            for k in 0..points {
                let r = (k + 1) as f64;
                b.push(r * c);
                b.push(r * s);
            }
        }
    }
    Tensor::from_vec(&[heads * levels * points * 2], b)
}

#[derive(Clone, Debug)]
pub struct MsDeformAttn {
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
    pub d_model: usize,
    pub value_proj: Linear,
    pub sampling_offsets: Linear,
    pub attention_weights: Linear,
    pub output_proj: Linear,
}

impl MsDeformAttn {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d_model: usize,
        heads: usize,
        levels: usize,
        points: usize,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            bail!(Config, "d_model {d_model} does not split into {heads} heads");
        }
        let n = heads * levels * points;
        let value_proj = Linear::new(store, rng, &format!("{prefix}.value_proj"), d_model, d_model, LinearInit::Xavier)?;
        let sampling_offsets = Linear::from_tensors(
            store,
            &format!("{prefix}.sampling_offsets"),
            Tensor::zeros(&[n * 2, d_model]),
            radial_offset_bias(heads, levels, points),
        )?;
        let attention_weights = Linear::new(
            store,
            rng,
            &format!("{prefix}.attention_weights"),
            d_model,
            n,
            LinearInit::Zeros(0.0),
        )?;
        let output_proj = Linear::new(store, rng, &format!("{prefix}.output_proj"), d_model, d_model, LinearInit::Xavier)?;
        Ok(Self {
            heads,
            levels,
            points,
            d_model,
            value_proj,
            sampling_offsets,
            attention_weights,
            output_proj,
        })
    }

    /// Offsets and softmax weights predicted from `[Q, d_model]` queries.
    pub fn compute_offsets_and_weights(&self, g: &Graph<'_>, query: &Var) -> Result<SamplingState> {
        let offsets = self.sampling_offsets.forward(g, query)?;
        let logits = self.attention_weights.forward(g, query)?;
        let weights = g.softmax_groups(&logits, self.levels * self.points)?;
        Ok(SamplingState { offsets, weights })
    }

    /// Head outputs before the final projection, `[Q, d_model]`.
    pub fn sample(
        &self,
        g: &Graph<'_>,
        query: &Var,
        refs: &ReferencePoints,
        input: &Var,
        shapes: &LevelShapes,
        padding: &[bool],
    ) -> Result<Var> {
        if shapes.len() != self.levels {
            bail!(Validation, "attention built for {} levels, got {}", self.levels, shapes.len());
        }
        if refs.coords.shape()[1] != self.levels || refs.num_queries() != query.shape()[0] {
            bail!(
                Validation,
                "reference points {:?} do not match {} queries over {} levels",
                refs.coords.shape(),
                query.shape()[0],
                self.levels
            );
        }
        if padding.len() != shapes.total() {
            bail!(Shape, "padding has {} flags for {} tokens", padding.len(), shapes.total());
        }
        let value = self.value_proj.forward(g, input)?;
        let keep: Vec<bool> = padding.iter().map(|&p| !p).collect();
        let value = g.mask_rows(&value, &keep)?;
        let state = self.compute_offsets_and_weights(g, query)?;
        g.deform_sample(&value, shapes, &refs.coords, &state.offsets, &state.weights, self.heads, self.points)
    }

    /// `[Q, d_model]` queries attend into `[N, d_model]` multi-scale tokens.
    pub fn forward(
        &self,
        g: &Graph<'_>,
        query: &Var,
        refs: &ReferencePoints,
        input: &Var,
        shapes: &LevelShapes,
        padding: &[bool],
    ) -> Result<Var> {
        let sampled = self.sample(g, query, refs, input, shapes, padding)?;
        self.output_proj.forward(g, &sampled)
    }
}
