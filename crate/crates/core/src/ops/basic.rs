use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::linalg::{gemm, MatRef};
use crate::tensor::Tensor;

fn same_shape(op: &str, a: &Var, b: &Var) -> Result<()> {
    if a.shape() != b.shape() {
        bail!(Shape, "{op}: shapes {:?} and {:?} differ", a.shape(), b.shape());
    }
    Ok(())
}

impl Graph<'_> {
    pub fn add(&self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("add", a, b)?;
        let mut out = a.value().clone();
        out.add_assign(b.value());
        Ok(self.op(out, &[a, b], |g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("sub", a, b)?;
        let data = a
            .value()
            .data()
            .iter()
            .zip(b.value().data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::from_vec(a.shape(), data);
        Ok(self.op(out, &[a, b], |g, _| vec![Some(g.clone()), Some(g.map(|v| -v))]))
    }

    pub fn mul(&self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("mul", a, b)?;
        let data = a
            .value()
            .data()
            .iter()
            .zip(b.value().data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_vec(a.shape(), data);
        let (ra, rb) = (a.rc(), b.rc());
        Ok(self.op(out, &[a, b], move |g, needs| {
            let ga = needs[0].then(|| {
                let d = g.data().iter().zip(rb.data()).map(|(g, y)| g * y).collect();
                Tensor::from_vec(g.shape(), d)
            });
            let gb = needs[1].then(|| {
                let d = g.data().iter().zip(ra.data()).map(|(g, x)| g * x).collect();
                Tensor::from_vec(g.shape(), d)
            });
            vec![ga, gb]
        }))
    }

    pub fn scale(&self, a: &Var, s: f64) -> Var {
        let out = a.value().map(|v| v * s);
        self.op(out, &[a], move |g, _| vec![Some(g.map(|v| v * s))])
    }

    pub fn relu(&self, a: &Var) -> Var {
        let out = a.value().map(|v| v.max(0.0));
        let ra = a.rc();
        self.op(out, &[a], move |g, _| {
            let d = g
                .data()
                .iter()
                .zip(ra.data())
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect();
            vec![Some(Tensor::from_vec(g.shape(), d))]
        })
    }

    pub fn sigmoid(&self, a: &Var) -> Var {
        let out = a.value().map(crate::math::sigmoid);
        let ro = alloc::rc::Rc::new(out.clone());
        self.op(out, &[a], move |g, _| {
            let d = g
                .data()
                .iter()
                .zip(ro.data())
                .map(|(g, &y)| g * y * (1.0 - y))
                .collect();
            vec![Some(Tensor::from_vec(g.shape(), d))]
        })
    }

    /// Multiplies by a constant tensor of the same shape (masks, fixed gates).
    pub fn mul_const(&self, a: &Var, c: &Tensor) -> Result<Var> {
        if a.shape() != c.shape() {
            bail!(Shape, "mul_const: shapes {:?} and {:?} differ", a.shape(), c.shape());
        }
        let data = a.value().data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(a.shape(), data);
        let c = c.clone();
        Ok(self.op(out, &[a], move |g, _| {
            let d = g.data().iter().zip(c.data()).map(|(g, y)| g * y).collect();
            vec![Some(Tensor::from_vec(g.shape(), d))]
        }))
    }

    /// Zeroes whole rows of an `[N, D]` tensor where `keep[i]` is false.
    pub fn mask_rows(&self, x: &Var, keep: &[bool]) -> Result<Var> {
        let (n, d) = x.value().dims2()?;
        if keep.len() != n {
            bail!(Shape, "mask_rows: {} flags for {} rows", keep.len(), n);
        }
        let mut c = Tensor::zeros(&[n, d]);
        for (i, &k) in keep.iter().enumerate() {
            if k {
                c.data_mut()[i * d..(i + 1) * d].fill(1.0);
            }
        }
        self.mul_const(x, &c)
    }

    /// `x[N, D] + b[D]` broadcast over rows.
    pub fn add_row_bias(&self, x: &Var, b: &Var) -> Result<Var> {
        let (_, d) = x.value().dims2()?;
        if b.value().numel() != d {
            bail!(Shape, "add_row_bias: bias of {} for width {}", b.value().numel(), d);
        }
        let mut out = x.value().clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            for (v, bb) in row.iter_mut().zip(b.value().data()) {
                *v += bb;
            }
        }
        let bshape = b.shape().to_vec();
        Ok(self.op(out, &[x, b], move |g, needs| {
            let gb = needs[1].then(|| {
                let mut acc = vec![0.0; d];
                for row in g.data().chunks_exact(d) {
                    for (a, v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                Tensor::from_vec(&bshape, acc)
            });
            vec![Some(g.clone()), gb]
        }))
    }

    /// `x[C, H, W] * w[C]` broadcast over the spatial grid.
    pub fn scale_channels(&self, x: &Var, w: &Var) -> Result<Var> {
        let (c, h, wd) = x.value().dims3()?;
        if w.value().numel() != c {
            bail!(Shape, "scale_channels: {} weights for {} channels", w.value().numel(), c);
        }
        let hw = h * wd;
        let mut out = x.value().clone();
        for (plane, s) in out.data_mut().chunks_exact_mut(hw).zip(w.value().data()) {
            plane.iter_mut().for_each(|v| *v *= s);
        }
        let (rx, rw) = (x.rc(), w.rc());
        let wshape = w.shape().to_vec();
        Ok(self.op(out, &[x, w], move |g, needs| {
            let gx = needs[0].then(|| {
                let mut gx = g.clone();
                for (plane, s) in gx.data_mut().chunks_exact_mut(hw).zip(rw.data()) {
                    plane.iter_mut().for_each(|v| *v *= s);
                }
                gx
            });
            let gw = needs[1].then(|| {
                let d = g
                    .data()
                    .chunks_exact(hw)
                    .zip(rx.data().chunks_exact(hw))
                    .map(|(gp, xp)| gp.iter().zip(xp).map(|(a, b)| a * b).sum())
                    .collect();
                Tensor::from_vec(&wshape, d)
            });
            vec![gx, gw]
        }))
    }

    /// `x[C, H, W] + b[C]` broadcast over the spatial grid.
    pub fn add_channel_bias(&self, x: &Var, b: &Var) -> Result<Var> {
        let (c, h, w) = x.value().dims3()?;
        if b.value().numel() != c {
            bail!(Shape, "add_channel_bias: {} biases for {} channels", b.value().numel(), c);
        }
        let hw = h * w;
        let mut out = x.value().clone();
        for (plane, s) in out.data_mut().chunks_exact_mut(hw).zip(b.value().data()) {
            plane.iter_mut().for_each(|v| *v += s);
        }
        let bshape = b.shape().to_vec();
        Ok(self.op(out, &[x, b], move |g, needs| {
            let gb = needs[1].then(|| {
                let d = g.data().chunks_exact(hw).map(|p| p.iter().sum()).collect();
                Tensor::from_vec(&bshape, d)
            });
            vec![Some(g.clone()), gb]
        }))
    }

    /// `a[M, K] · b[K, N]`.
    pub fn matmul(&self, a: &Var, b: &Var) -> Result<Var> {
        let (m, k) = a.value().dims2()?;
        let (k2, n) = b.value().dims2()?;
        if k != k2 {
            bail!(Shape, "matmul: [{m}, {k}] · [{k2}, {n}]");
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            MatRef::new(a.value().data(), m, k),
            MatRef::new(b.value().data(), k, n),
            0.0,
            out.data_mut(),
            n,
        );
        let (ra, rb) = (a.rc(), b.rc());
        Ok(self.op(out, &[a, b], move |g, needs| {
            let ga = needs[0].then(|| {
                let mut t = Tensor::zeros(&[m, k]);
                gemm(MatRef::new(g.data(), m, n), MatRef::new(rb.data(), k, n).t(), 0.0, t.data_mut(), k);
                t
            });
            let gb = needs[1].then(|| {
                let mut t = Tensor::zeros(&[k, n]);
                gemm(MatRef::new(ra.data(), m, k).t(), MatRef::new(g.data(), m, n), 0.0, t.data_mut(), n);
                t
            });
            vec![ga, gb]
        }))
    }

    /// Affine map `x[N, in] · w[out, in]ᵀ + b[out]`.
    pub fn linear(&self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        let (n, din) = x.value().dims2()?;
        let (dout, win) = w.value().dims2()?;
        if din != win {
            bail!(Shape, "linear: input width {din}, weight expects {win}");
        }
        let mut out = Tensor::zeros(&[n, dout]);
        if let Some(b) = b {
            if b.value().numel() != dout {
                bail!(Shape, "linear: bias of {} for {} outputs", b.value().numel(), dout);
            }
            for row in out.data_mut().chunks_exact_mut(dout) {
                row.copy_from_slice(b.value().data());
            }
        }
        gemm(
            MatRef::new(x.value().data(), n, din),
            MatRef::new(w.value().data(), dout, din).t(),
            1.0,
            out.data_mut(),
            dout,
        );
        let (rx, rw) = (x.rc(), w.rc());
        let mut parents: Vec<&Var> = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        let has_bias = b.is_some();
        let bshape = b.map(|b| b.shape().to_vec());
        Ok(self.op(out, &parents, move |g, needs| {
            let gx = needs[0].then(|| {
                let mut t = Tensor::zeros(&[n, din]);
                gemm(MatRef::new(g.data(), n, dout), MatRef::new(rw.data(), dout, din), 0.0, t.data_mut(), din);
                t
            });
            let gw = needs[1].then(|| {
                let mut t = Tensor::zeros(&[dout, din]);
                gemm(MatRef::new(g.data(), n, dout).t(), MatRef::new(rx.data(), n, din), 0.0, t.data_mut(), din);
                t
            });
            let mut res = vec![gx, gw];
            if has_bias {
                let gb = needs[2].then(|| {
                    let mut acc = vec![0.0; dout];
                    for row in g.data().chunks_exact(dout) {
                        for (a, v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Tensor::from_vec(bshape.as_deref().unwrap_or(&[dout]), acc)
                });
                res.push(gb);
            }
            res
        }))
    }

    pub fn transpose(&self, x: &Var) -> Result<Var> {
        let (r, c) = x.value().dims2()?;
        let out = transpose_data(x.value().data(), r, c);
        Ok(self.op(Tensor::from_vec(&[c, r], out), &[x], move |g, _| {
            vec![Some(Tensor::from_vec(&[r, c], transpose_data(g.data(), c, r)))]
        }))
    }

    pub fn reshape(&self, x: &Var, shape: &[usize]) -> Result<Var> {
        let out = x.value().clone().reshape(shape)?;
        let orig = x.shape().to_vec();
        Ok(self.op(out, &[x], move |g, _| {
            vec![Some(g.clone().reshape(&orig).expect("reshape grad"))]
        }))
    }

    /// `[C, H, W]` map to `[H·W, C]` tokens (row-major over the grid).
    pub fn map_to_tokens(&self, x: &Var) -> Result<Var> {
        let (c, h, w) = x.value().dims3()?;
        let flat = self.reshape(x, &[c, h * w])?;
        self.transpose(&flat)
    }

    /// `[H·W, C]` tokens back to a `[C, H, W]` map.
    pub fn tokens_to_map(&self, x: &Var, h: usize, w: usize) -> Result<Var> {
        let (n, c) = x.value().dims2()?;
        if n != h * w {
            bail!(Shape, "tokens_to_map: {n} tokens for a {h}x{w} grid");
        }
        let t = self.transpose(x)?;
        self.reshape(&t, &[c, h, w])
    }

    /// Stacks rank-2 tensors with a common width along rows.
    pub fn concat_rows(&self, parts: &[&Var]) -> Result<Var> {
        if parts.is_empty() {
            bail!(Shape, "concat_rows of nothing");
        }
        let d = parts[0].value().dims2()?.1;
        let mut rows = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for p in parts {
            let (r, c) = p.value().dims2()?;
            if c != d {
                bail!(Shape, "concat_rows: widths {d} and {c}");
            }
            rows.push(r);
            data.extend_from_slice(p.value().data());
        }
        let total: usize = rows.iter().sum();
        Ok(self.op(Tensor::from_vec(&[total, d], data), parts, move |g, needs| {
            let mut off = 0;
            rows.iter()
                .zip(needs)
                .map(|(&r, &need)| {
                    let part = need.then(|| {
                        Tensor::from_vec(&[r, d], g.data()[off * d..(off + r) * d].to_vec())
                    });
                    off += r;
                    part
                })
                .collect()
        }))
    }

    /// Columns `[start, end)` of a rank-2 tensor.
    pub fn slice_cols(&self, x: &Var, start: usize, end: usize) -> Result<Var> {
        let (n, d) = x.value().dims2()?;
        if start > end || end > d {
            bail!(Shape, "slice_cols {start}..{end} of width {d}");
        }
        let w = end - start;
        let mut data = Vec::with_capacity(n * w);
        for row in x.value().data().chunks_exact(d) {
            data.extend_from_slice(&row[start..end]);
        }
        Ok(self.op(Tensor::from_vec(&[n, w], data), &[x], move |g, _| {
            let mut full = Tensor::zeros(&[n, d]);
            for (dst, src) in full.data_mut().chunks_exact_mut(d).zip(g.data().chunks_exact(w)) {
                dst[start..end].copy_from_slice(src);
            }
            vec![Some(full)]
        }))
    }

    /// Rows `[start, end)` of a rank-2 tensor.
    pub fn slice_rows(&self, x: &Var, start: usize, end: usize) -> Result<Var> {
        let (n, d) = x.value().dims2()?;
        if start > end || end > n {
            bail!(Shape, "slice_rows {start}..{end} of {n}");
        }
        let data = x.value().data()[start * d..end * d].to_vec();
        Ok(self.op(Tensor::from_vec(&[end - start, d], data), &[x], move |g, _| {
            let mut full = Tensor::zeros(&[n, d]);
            full.data_mut()[start * d..end * d].copy_from_slice(g.data());
            vec![Some(full)]
        }))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&self, x: &Var) -> Var {
        let shape = x.shape().to_vec();
        self.op(Tensor::scalar(x.value().sum()), &[x], move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    /// Sum of scalar vars.
    pub fn add_scalars(&self, xs: &[&Var]) -> Var {
        let total = xs.iter().map(|x| x.value().sum()).sum();
        let shapes: Vec<Vec<usize>> = xs.iter().map(|x| x.shape().to_vec()).collect();
        self.op(Tensor::scalar(total), xs, move |g, _| {
            shapes.iter().map(|s| Some(Tensor::full(s, g.item()))).collect()
        })
    }

    /// Inverted dropout; identity outside training or when `p == 0`.
    pub fn dropout(&self, x: &Var, p: f64) -> Var {
        if !self.is_training() || p <= 0.0 {
            return x.clone();
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = self.with_rng(|rng| {
            (0..x.value().numel())
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect()
        });
        let mask = Tensor::from_vec(x.shape(), mask);
        self.mul_const(x, &mask).expect("dropout mask shape")
    }
}

pub(crate) fn transpose_data(src: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    const B: usize = 32;
    for i0 in (0..r).step_by(B) {
        for j0 in (0..c).step_by(B) {
            for i in i0..(i0 + B).min(r) {
                for j in j0..(j0 + B).min(c) {
                    out[j * r + i] = src[i * c + j];
                }
            }
        }
    }
    out
}

impl Graph<'_> {
    /// `x · s` for a one-element `s`.
    pub fn scale_by(&self, x: &Var, s: &Var) -> Result<Var> {
        if s.value().numel() != 1 {
            bail!(Shape, "scale_by needs a one-element factor, got {:?}", s.shape());
        }
        let k = s.value().data()[0];
        let out = x.value().map(|v| v * k);
        let rx = x.rc();
        let sshape = s.shape().to_vec();
        Ok(self.op(out, &[x, s], move |g, needs| {
            let gx = needs[0].then(|| g.map(|v| v * k));
            let gs = needs[1].then(|| {
                let dot: f64 = g.data().iter().zip(rx.data()).map(|(a, b)| a * b).sum();
                Tensor::from_vec(&sshape, alloc::vec![dot])
            });
            vec![gx, gs]
        }))
    }

    /// Element `i` of a tensor as a one-element tensor.
    pub fn pick(&self, x: &Var, i: usize) -> Result<Var> {
        let n = x.value().numel();
        if i >= n {
            bail!(Shape, "pick {i} of {n}");
        }
        let shape = x.shape().to_vec();
        Ok(self.op(Tensor::scalar(x.value().data()[i]), &[x], move |g, _| {
            let mut t = Tensor::zeros(&shape);
            t.data_mut()[i] = g.item();
            vec![Some(t)]
        }))
    }
}

impl Graph<'_> {
    /// Rows `indices` of a `[N, D]` table, `[len, D]`.
    pub fn gather_rows(&self, table: &Var, indices: &[usize]) -> Result<Var> {
        let (n, d) = table.value().dims2()?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            bail!(Shape, "gather_rows: index {bad} out of {n} rows");
        }
        let src = table.value().data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let idx = indices.to_vec();
        Ok(self.op(Tensor::from_vec(&[indices.len(), d], out), &[table], move |g, _| {
            let mut acc = vec![0.0; n * d];
            for (r, &i) in idx.iter().enumerate() {
                for (a, v) in acc[i * d..(i + 1) * d].iter_mut().zip(g.row(r)) {
                    *a += v;
                }
            }
            vec![Some(Tensor::from_vec(&[n, d], acc))]
        }))
    }

    /// `[a | b]` side by side.
    pub fn concat_cols(&self, a: &Var, b: &Var) -> Result<Var> {
        let (n, da) = a.value().dims2()?;
        let (nb, db) = b.value().dims2()?;
        if n != nb {
            bail!(Shape, "concat_cols: {n} and {nb} rows");
        }
        let mut out = Vec::with_capacity(n * (da + db));
        for r in 0..n {
            out.extend_from_slice(a.value().row(r));
            out.extend_from_slice(b.value().row(r));
        }
        Ok(self.op(Tensor::from_vec(&[n, da + db], out), &[a, b], move |g, needs| {
            let ga = needs[0].then(|| {
                let d = (0..n).flat_map(|r| g.row(r)[..da].to_vec()).collect();
                Tensor::from_vec(&[n, da], d)
            });
            let gb = needs[1].then(|| {
                let d = (0..n).flat_map(|r| g.row(r)[da..].to_vec()).collect();
                Tensor::from_vec(&[n, db], d)
            });
            vec![ga, gb]
        }))
    }
}
