use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::math;
use crate::tensor::Tensor;

impl Graph<'_> {
    /// Layer normalization over the last axis of `[N, D]` with affine `gamma`, `beta`.
    pub fn layer_norm(&self, x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let (n, d) = x.value().dims2()?;
        if gamma.value().numel() != d || beta.value().numel() != d {
            bail!(Shape, "layer_norm: affine params must have width {d}");
        }
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        let (gm, bt) = (gamma.value().data(), beta.value().data());
        for i in 0..n {
            let row = x.value().row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / math::sqrt(var + eps);
            inv_std[i] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[i * d + j] = xh;
                out[i * d + j] = xh * gm[j] + bt[j];
            }
        }
        let rg = gamma.rc();
        let (gshape, bshape) = (gamma.shape().to_vec(), beta.shape().to_vec());
        Ok(self.op(Tensor::from_vec(&[n, d], out), &[x, gamma, beta], move |g, needs| {
            let gd = g.data();
            let gx = needs[0].then(|| {
                let gm = rg.data();
                let mut gx = vec![0.0; n * d];
                for i in 0..n {
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for j in 0..d {
                        let dxh = gd[i * d + j] * gm[j];
                        s1 += dxh;
                        s2 += dxh * xhat[i * d + j];
                    }
                    let (m1, m2) = (s1 / d as f64, s2 / d as f64);
                    for j in 0..d {
                        let dxh = gd[i * d + j] * gm[j];
                        gx[i * d + j] = inv_std[i] * (dxh - m1 - xhat[i * d + j] * m2);
                    }
                }
                Tensor::from_vec(&[n, d], gx)
            });
            let ggamma = needs[1].then(|| {
                let mut acc = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        acc[j] += gd[i * d + j] * xhat[i * d + j];
                    }
                }
                Tensor::from_vec(&gshape, acc)
            });
            let gbeta = needs[2].then(|| {
                let mut acc = vec![0.0; d];
                for row in gd.chunks_exact(d) {
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                Tensor::from_vec(&bshape, acc)
            });
            vec![gx, ggamma, gbeta]
        }))
    }

    /// Softmax over consecutive groups of `group` entries along the last axis.
    pub fn softmax_groups(&self, x: &Var, group: usize) -> Result<Var> {
        let n = x.value().numel();
        if group == 0 || !n.is_multiple_of(group) {
            bail!(Shape, "softmax_groups: {n} entries not divisible into groups of {group}");
        }
        let mut out: Vec<f64> = x.value().data().to_vec();
        for chunk in out.chunks_exact_mut(group) {
            softmax_in_place(chunk);
        }
        let y = Tensor::from_vec(x.shape(), out);
        let ry = alloc::rc::Rc::new(y.clone());
        Ok(self.op(y, &[x], move |g, _| {
            let mut gx = vec![0.0; n];
            for ((dst, gy), yy) in gx
                .chunks_exact_mut(group)
                .zip(g.data().chunks_exact(group))
                .zip(ry.data().chunks_exact(group))
            {
                let dot: f64 = gy.iter().zip(yy).map(|(a, b)| a * b).sum();
                for ((d, a), b) in dst.iter_mut().zip(gy).zip(yy) {
                    *d = b * (a - dot);
                }
            }
            vec![Some(Tensor::from_vec(g.shape(), gx))]
        }))
    }
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = math::exp(*x - m);
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}
