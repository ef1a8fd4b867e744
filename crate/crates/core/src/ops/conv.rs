use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::linalg::{gemm, MatRef};
use crate::tensor::Tensor;

/// Output extent of a convolution along one axis.
pub fn conv2d_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfolds `[C, H, W]` into `[C·k·k, OH·OW]` patch columns.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    src: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let p = oh * ow;
    let mut cols = vec![0.0; c * k * k * p];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        // contiguous span of valid columns
                        let lo = pad.saturating_sub(kj);
                        let hi = (w + pad).saturating_sub(kj).min(ow);
                        if lo < hi {
                            let ix0 = lo + kj - pad;
                            dst_row[lo..hi].copy_from_slice(&src_row[ix0..ix0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds columns back, summing overlapping patches.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let p = oh * ow;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src_row = &src[oy * ow..(oy + 1) * ow];
                    for (ox, v) in src_row.iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    out
}

fn spatial_sum(g: &Tensor, channels: usize) -> Tensor {
    let hw = g.numel() / channels;
    let d = g.data().chunks_exact(hw).map(|p| p.iter().sum()).collect();
    Tensor::from_vec(&[channels], d)
}

impl Graph<'_> {
    /// 2-D convolution of a `[C, H, W]` map with weights `[O, C, k, k]`.
    pub fn conv2d(&self, x: &Var, w: &Var, b: Option<&Var>, stride: usize, pad: usize) -> Result<Var> {
        let (c, h, wd) = x.value().dims3()?;
        let (o, wc, k) = match w.shape() {
            &[o, wc, k1, k2] if k1 == k2 => (o, wc, k1),
            s => bail!(Shape, "conv2d weight must be [O, C, k, k], got {s:?}"),
        };
        if wc != c {
            bail!(Shape, "conv2d: input has {c} channels, weight expects {wc}");
        }
        if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            bail!(Shape, "conv2d: {h}x{wd} input too small for kernel {k} (pad {pad})");
        }
        let oh = conv2d_out_size(h, k, stride, pad);
        let ow = conv2d_out_size(wd, k, stride, pad);
        let p = oh * ow;
        let ckk = c * k * k;
        let pointwise = k == 1 && stride == 1 && pad == 0;
        let cols_owned;
        let cols: &[f64] = if pointwise {
            x.value().data()
        } else {
            cols_owned = im2col(x.value().data(), c, h, wd, k, stride, pad, oh, ow);
            &cols_owned
        };
        let mut out = Tensor::zeros(&[o, oh, ow]);
        if let Some(b) = b {
            if b.value().numel() != o {
                bail!(Shape, "conv2d: bias of {} for {o} outputs", b.value().numel());
            }
            for (plane, bv) in out.data_mut().chunks_exact_mut(p).zip(b.value().data()) {
                plane.fill(*bv);
            }
        }
        gemm(
            MatRef::new(w.value().data(), o, ckk),
            MatRef::new(cols, ckk, p),
            1.0,
            out.data_mut(),
            p,
        );
        let (rx, rw) = (x.rc(), w.rc());
        let wshape = w.shape().to_vec();
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        let has_bias = b.is_some();
        Ok(self.op(out, &parents, move |g, needs| {
            let cols_owned;
            let cols: &[f64] = if pointwise {
                rx.data()
            } else if needs[1] {
                cols_owned = im2col(rx.data(), c, h, wd, k, stride, pad, oh, ow);
                &cols_owned
            } else {
                &[]
            };
            let gw = needs[1].then(|| {
                let mut t = Tensor::zeros(&wshape);
                gemm(MatRef::new(g.data(), o, p), MatRef::new(cols, ckk, p).t(), 0.0, t.data_mut(), ckk);
                t
            });
            let gx = needs[0].then(|| {
                let mut dcols = vec![0.0; ckk * p];
                gemm(MatRef::new(rw.data(), o, ckk).t(), MatRef::new(g.data(), o, p), 0.0, &mut dcols, p);
                let data = if pointwise {
                    dcols
                } else {
                    col2im(&dcols, c, h, wd, k, stride, pad, oh, ow)
                };
                Tensor::from_vec(&[c, h, wd], data)
            });
            let mut res = vec![gx, gw];
            if has_bias {
                res.push(needs[2].then(|| spatial_sum(g, o)));
            }
            res
        }))
    }

    /// Transposed convolution of `[C, H, W]` with weights `[C, O, k, k]`; output extent
    /// is `(H - 1)·stride - 2·pad + k + output_pad` per axis.
    #[allow(clippy::too_many_arguments)]
    pub fn conv_transpose2d(
        &self,
        x: &Var,
        w: &Var,
        b: Option<&Var>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var> {
        let (c, h, wd) = x.value().dims3()?;
        let (wc, o, k) = match w.shape() {
            &[wc, o, k1, k2] if k1 == k2 => (wc, o, k1),
            s => bail!(Shape, "conv_transpose2d weight must be [C, O, k, k], got {s:?}"),
        };
        if wc != c {
            bail!(Shape, "conv_transpose2d: input has {c} channels, weight expects {wc}");
        }
        if output_pad >= stride.max(1) && output_pad > 0 {
            bail!(Shape, "conv_transpose2d: output padding {output_pad} must be below stride {stride}");
        }
        let full = (h - 1) * stride + k + output_pad;
        let fullw = (wd - 1) * stride + k + output_pad;
        if full < 2 * pad + 1 || fullw < 2 * pad + 1 {
            bail!(Shape, "conv_transpose2d: padding {pad} too large");
        }
        let oh = full - 2 * pad;
        let ow = fullw - 2 * pad;
        let okk = o * k * k;
        let hw = h * wd;
        let mut cols = vec![0.0; okk * hw];
        gemm(
            MatRef::new(w.value().data(), c, okk).t(),
            MatRef::new(x.value().data(), c, hw),
            0.0,
            &mut cols,
            hw,
        );
        let mut data = col2im(&cols, o, oh, ow, k, stride, pad, h, wd);
        if let Some(b) = b {
            if b.value().numel() != o {
                bail!(Shape, "conv_transpose2d: bias of {} for {o} outputs", b.value().numel());
            }
            for (plane, bv) in data.chunks_exact_mut(oh * ow).zip(b.value().data()) {
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
        let out = Tensor::from_vec(&[o, oh, ow], data);
        let (rx, rw) = (x.rc(), w.rc());
        let wshape = w.shape().to_vec();
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        let has_bias = b.is_some();
        Ok(self.op(out, &parents, move |g, needs| {
            let dcols = im2col(g.data(), o, oh, ow, k, stride, pad, h, wd);
            let gx = needs[0].then(|| {
                let mut t = Tensor::zeros(&[c, h, wd]);
                gemm(MatRef::new(rw.data(), c, okk), MatRef::new(&dcols, okk, hw), 0.0, t.data_mut(), hw);
                t
            });
            let gw = needs[1].then(|| {
                let mut t = Tensor::zeros(&wshape);
                gemm(MatRef::new(rx.data(), c, hw), MatRef::new(&dcols, okk, hw).t(), 0.0, t.data_mut(), okk);
                t
            });
            let mut res = vec![gx, gw];
            if has_bias {
                res.push(needs[2].then(|| spatial_sum(g, o)));
            }
            res
        }))
    }
}
