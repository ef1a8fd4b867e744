use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::math;
use crate::ops::conv2d_out_size;
use crate::tensor::Tensor;

/// Source taps for half-pixel-centred bilinear resampling along one axis.
#[derive(Clone, Debug)]
pub struct ResizeAxis {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    /// Weight of the `hi` tap; the `lo` tap gets `1 - frac`.
    pub frac: Vec<f64>,
}

impl ResizeAxis {
    /// Maps output index `i` to source coordinate `(i + 0.5)·in/out − 0.5`, clamped
    /// at the low edge and replicated at the high edge.
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut frac = Vec::with_capacity(output);
        for i in 0..output {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let l = (math::floor(src) as usize).min(input - 1);
            let h = (l + 1).min(input - 1);
            lo.push(l);
            hi.push(h);
            frac.push(if h == l { 0.0 } else { src - l as f64 });
        }
        Self { lo, hi, frac }
    }
}

fn resize_forward(src: &[f64], c: usize, h: usize, w: usize, ry: &ResizeAxis, rx: &ResizeAxis) -> Vec<f64> {
    let (oh, ow) = (ry.lo.len(), rx.lo.len());
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, fy) = (ry.lo[oy], ry.hi[oy], ry.frac[oy]);
            let r0 = &plane[y0 * w..(y0 + 1) * w];
            let r1 = &plane[y1 * w..(y1 + 1) * w];
            for ox in 0..ow {
                let (x0, x1, fx) = (rx.lo[ox], rx.hi[ox], rx.frac[ox]);
                let top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
                let bot = r1[x0] * (1.0 - fx) + r1[x1] * fx;
                dst[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

fn resize_backward(g: &[f64], c: usize, h: usize, w: usize, ry: &ResizeAxis, rx: &ResizeAxis) -> Vec<f64> {
    let (oh, ow) = (ry.lo.len(), rx.lo.len());
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let gp = &g[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = (ry.lo[oy], ry.hi[oy], ry.frac[oy]);
            for ox in 0..ow {
                let (x0, x1, fx) = (rx.lo[ox], rx.hi[ox], rx.frac[ox]);
                let v = gp[oy * ow + ox];
                dst[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += v * (1.0 - fy) * fx;
                dst[y1 * w + x0] += v * fy * (1.0 - fx);
                dst[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    out
}

/// Bilinear resize of a plain `[C, H, W]` tensor (no graph).
pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if oh == 0 || ow == 0 || h == 0 || w == 0 {
        bail!(Shape, "resize between empty grids");
    }
    let (ry, rx) = (ResizeAxis::new(h, oh), ResizeAxis::new(w, ow));
    Ok(Tensor::from_vec(&[c, oh, ow], resize_forward(x.data(), c, h, w, &ry, &rx)))
}

impl Graph<'_> {
    /// Bilinear resize of a `[C, H, W]` map to `oh × ow` (up or down).
    pub fn resize_bilinear(&self, x: &Var, oh: usize, ow: usize) -> Result<Var> {
        let (c, h, w) = x.value().dims3()?;
        if oh == h && ow == w {
            return Ok(x.clone());
        }
        let out = resize_bilinear(x.value(), oh, ow)?;
        let (ry, rx) = (ResizeAxis::new(h, oh), ResizeAxis::new(w, ow));
        Ok(self.op(out, &[x], move |g, _| {
            vec![Some(Tensor::from_vec(&[c, h, w], resize_backward(g.data(), c, h, w, &ry, &rx)))]
        }))
    }

    /// Max pooling over `k × k` windows; padded cells never win.
    pub fn max_pool2d(&self, x: &Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let (c, h, w) = x.value().dims3()?;
        if h + 2 * pad < k || w + 2 * pad < k {
            bail!(Shape, "max_pool2d: {h}x{w} input too small");
        }
        let oh = conv2d_out_size(h, k, stride, pad);
        let ow = conv2d_out_size(w, k, stride, pad);
        let src = x.value().data();
        let mut out = vec![0.0; c * oh * ow];
        let mut arg = vec![0usize; c * oh * ow];
        for ch in 0..c {
            let base = ch * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for ki in 0..k {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if src[idx] > best || best_i == usize::MAX {
                                best = src[idx];
                                best_i = idx;
                            }
                        }
                    }
                    let o = (ch * oh + oy) * ow + ox;
                    out[o] = best;
                    arg[o] = best_i;
                }
            }
        }
        let n = c * h * w;
        Ok(self.op(Tensor::from_vec(&[c, oh, ow], out), &[x], move |g, _| {
            let mut gx = vec![0.0; n];
            for (gv, &i) in g.data().iter().zip(&arg) {
                gx[i] += gv;
            }
            vec![Some(Tensor::from_vec(&[c, h, w], gx))]
        }))
    }

    /// Per-channel mean over unmasked positions of `[C, H, W]`; `mask[i]` true marks padding.
    pub fn masked_avg_pool(&self, x: &Var, mask: Option<&[bool]>) -> Result<Var> {
        let (c, h, w) = x.value().dims3()?;
        let hw = h * w;
        let valid = valid_positions(mask, hw)?;
        let inv = 1.0 / valid.len() as f64;
        let data = x
            .value()
            .data()
            .chunks_exact(hw)
            .map(|p| valid.iter().map(|&i| p[i]).sum::<f64>() * inv)
            .collect();
        Ok(self.op(Tensor::from_vec(&[c], data), &[x], move |g, _| {
            let mut gx = vec![0.0; c * hw];
            for (ch, gv) in g.data().iter().enumerate() {
                for &i in &valid {
                    gx[ch * hw + i] = gv * inv;
                }
            }
            vec![Some(Tensor::from_vec(&[c, h, w], gx))]
        }))
    }

    /// Per-channel maximum over unmasked positions of `[C, H, W]`.
    pub fn masked_max_pool(&self, x: &Var, mask: Option<&[bool]>) -> Result<Var> {
        let (c, h, w) = x.value().dims3()?;
        let hw = h * w;
        let valid = valid_positions(mask, hw)?;
        let mut arg = Vec::with_capacity(c);
        let mut data = Vec::with_capacity(c);
        for (ch, p) in x.value().data().chunks_exact(hw).enumerate() {
            let mut best = valid[0];
            for &i in &valid[1..] {
                if p[i] > p[best] {
                    best = i;
                }
            }
            arg.push(ch * hw + best);
            data.push(p[best]);
        }
        Ok(self.op(Tensor::from_vec(&[c], data), &[x], move |g, _| {
            let mut gx = vec![0.0; c * hw];
            for (gv, &i) in g.data().iter().zip(&arg) {
                gx[i] += gv;
            }
            vec![Some(Tensor::from_vec(&[c, h, w], gx))]
        }))
    }
}

fn valid_positions(mask: Option<&[bool]>, hw: usize) -> Result<Vec<usize>> {
    let valid: Vec<usize> = match mask {
        Some(m) => {
            if m.len() != hw {
                bail!(Shape, "mask has {} cells for a grid of {hw}", m.len());
            }
            (0..hw).filter(|&i| !m[i]).collect()
        }
        None => (0..hw).collect(),
    };
    if valid.is_empty() {
        bail!(Validation, "pooling over a fully masked map");
    }
    Ok(valid)
}
