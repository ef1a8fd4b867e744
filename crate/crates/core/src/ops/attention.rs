use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::linalg::{gemm, MatRef};
use crate::math;
use crate::ops::norm::softmax_in_place;
use crate::tensor::Tensor;

impl Graph<'_> {
    /// Multi-head scaled dot-product attention over already-projected
    /// `q[Nq, D]`, `k[Nk, D]`, `v[Nk, D]`; heads split `D` into equal column blocks.
    pub fn scaled_dot_attention(&self, q: &Var, k: &Var, v: &Var, heads: usize) -> Result<Var> {
        let (nq, d) = q.value().dims2()?;
        let (nk, dk) = k.value().dims2()?;
        let (nv, dv) = v.value().dims2()?;
        if dk != d || dv != d || nv != nk {
            bail!(Shape, "attention: q [{nq}, {d}], k [{nk}, {dk}], v [{nv}, {dv}]");
        }
        if heads == 0 || d % heads != 0 {
            bail!(Config, "attention: width {d} not divisible by {heads} heads");
        }
        let dh = d / heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let (qd, kd, vd) = (q.value().data(), k.value().data(), v.value().data());
        let mut probs: Vec<Vec<f64>> = Vec::with_capacity(heads);
        let mut out = vec![0.0; nq * d];
        for h in 0..heads {
            let mut s = vec![0.0; nq * nk];
            gemm(
                MatRef::strided(&qd[h * dh..], nq, dh, d),
                MatRef::strided(&kd[h * dh..], nk, dh, d).t(),
                0.0,
                &mut s,
                nk,
            );
            for row in s.chunks_exact_mut(nk) {
                row.iter_mut().for_each(|x| *x *= scale);
                softmax_in_place(row);
            }
            gemm(
                MatRef::new(&s, nq, nk),
                MatRef::strided(&vd[h * dh..], nk, dh, d),
                0.0,
                &mut out[h * dh..],
                d,
            );
            probs.push(s);
        }
        let (rq, rk, rv) = (q.rc(), k.rc(), v.rc());
        Ok(self.op(Tensor::from_vec(&[nq, d], out), &[q, k, v], move |g, needs| {
            let gd = g.data();
            let mut gq = vec![0.0; nq * d];
            let mut gk = vec![0.0; nk * d];
            let mut gv = vec![0.0; nk * d];
            for (h, p) in probs.iter().enumerate() {
                let go = MatRef::strided(&gd[h * dh..], nq, dh, d);
                if needs[2] {
                    gemm(MatRef::new(p, nq, nk).t(), go, 0.0, &mut gv[h * dh..], d);
                }
                if !(needs[0] || needs[1]) {
                    continue;
                }
                // dP = dO · Vᵀ, then softmax backward into dS (scaled).
                let mut ds = vec![0.0; nq * nk];
                gemm(go, MatRef::strided(&rv.data()[h * dh..], nk, dh, d).t(), 0.0, &mut ds, nk);
                for (drow, prow) in ds.chunks_exact_mut(nk).zip(p.chunks_exact(nk)) {
                    let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for (dv, pv) in drow.iter_mut().zip(prow) {
                        *dv = pv * (*dv - dot) * scale;
                    }
                }
                if needs[0] {
                    gemm(
                        MatRef::new(&ds, nq, nk),
                        MatRef::strided(&rk.data()[h * dh..], nk, dh, d),
                        0.0,
                        &mut gq[h * dh..],
                        d,
                    );
                }
                if needs[1] {
                    gemm(
                        MatRef::new(&ds, nq, nk).t(),
                        MatRef::strided(&rq.data()[h * dh..], nq, dh, d),
                        0.0,
                        &mut gk[h * dh..],
                        d,
                    );
                }
            }
            vec![
                needs[0].then(|| Tensor::from_vec(&[nq, d], gq)),
                needs[1].then(|| Tensor::from_vec(&[nk, d], gk)),
                needs[2].then(|| Tensor::from_vec(&[nk, d], gv)),
            ]
        }))
    }
}
