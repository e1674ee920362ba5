//! Differentiable operations. Every op computes its forward value eagerly and,
//! when any input requires a gradient, records a closure that maps the output
//! gradient onto its inputs.

use std::sync::Arc;

use crate::float::{gemm, Float, MatView};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

fn broadcast_suffix(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn broadcast_prefix(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[..b.len()] == *b
}

impl<F: Float> Graph<F> {
    /// `a + b`, where `b` may broadcast over the leading axes of `a`.
    pub fn add(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(broadcast_suffix(av.shape(), bv.shape()), "add: {:?} vs {:?}", av.shape(), bv.shape());
        let n = bv.numel().max(1);
        let mut out = av.as_ref().clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv.data()[i % n];
        }
        let bshape = bv.shape().to_vec();
        self.push(out, &[a, b], move |g, sink| {
            sink.add(a, g.clone());
            if sink.wants(b) {
                let gb = sink.buf(b, &bshape);
                for (i, &v) in g.data().iter().enumerate() {
                    gb[i % n] += v;
                }
            }
        })
    }

    /// `a - b` with the same broadcasting rule as [`Graph::add`].
    pub fn sub(&self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, F::from_f64(-1.0));
        self.add(a, nb)
    }

    /// Element-wise product; `b` may broadcast over leading axes of `a`.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(broadcast_suffix(av.shape(), bv.shape()), "mul: {:?} vs {:?}", av.shape(), bv.shape());
        let n = bv.numel().max(1);
        let data: Vec<F> = av.data().iter().enumerate().map(|(i, &x)| x * bv.data()[i % n]).collect();
        let out = Tensor::new(av.shape(), data);
        self.push(out, &[a, b], move |g, sink| {
            if sink.wants(a) {
                let ga = sink.buf(a, av.shape());
                for (i, &v) in g.data().iter().enumerate() {
                    ga[i] += v * bv.data()[i % n];
                }
            }
            if sink.wants(b) {
                let gb = sink.buf(b, bv.shape());
                for (i, &v) in g.data().iter().enumerate() {
                    gb[i % n] += v * av.data()[i];
                }
            }
        })
    }

    /// Scales each trailing block of `a` by the matching entry of `s`, where
    /// `s.shape()` is a prefix of `a.shape()`.
    pub fn mul_prefix(&self, a: Var, s: Var) -> Var {
        let (av, sv) = (self.value(a), self.value(s));
        assert!(broadcast_prefix(av.shape(), sv.shape()), "mul_prefix: {:?} vs {:?}", av.shape(), sv.shape());
        let inner = av.numel() / sv.numel().max(1);
        let mut data = av.data().to_vec();
        for (blk, &sc) in data.chunks_mut(inner).zip(sv.data()) {
            for x in blk {
                *x *= sc;
            }
        }
        let out = Tensor::new(av.shape(), data);
        self.push(out, &[a, s], move |g, sink| {
            if sink.wants(a) {
                let ga = sink.buf(a, av.shape());
                for ((gab, gb), &sc) in ga.chunks_mut(inner).zip(g.data().chunks(inner)).zip(sv.data()) {
                    for (x, &v) in gab.iter_mut().zip(gb) {
                        *x += v * sc;
                    }
                }
            }
            if sink.wants(s) {
                let gs = sink.buf(s, sv.shape());
                for ((x, gb), ab) in gs.iter_mut().zip(g.data().chunks(inner)).zip(av.data().chunks(inner)) {
                    let mut acc = F::zero();
                    for (&v, &w) in gb.iter().zip(ab) {
                        acc += v * w;
                    }
                    *x += acc;
                }
            }
        })
    }

    pub fn scale(&self, a: Var, c: F) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, &[a], move |g, sink| sink.add(a, g.map(|v| v * c)))
    }

    pub fn add_scalar(&self, a: Var, c: F) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, &[a], move |g, sink| sink.add(a, g.clone()))
    }

    /// `x @ w (+ b)` for `x: [.., k]`, `w: [k, n]`, `b: [n]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(wv.shape().len(), 2, "linear weight must be 2-D");
        let (k, n) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(xv.last_dim(), k, "linear: input {:?} vs weight {:?}", xv.shape(), wv.shape());
        let m = xv.rows();
        let mut out_shape = xv.shape().to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![F::zero(); m * n];
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.shape(), [n], "linear bias shape");
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(F::one(), xv.data(), MatView::dense(0, m, k), wv.data(), MatView::dense(0, k, n), F::one(), &mut out, MatView::dense(0, m, n));
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(Tensor::new(&out_shape, out), &parents, move |g, sink| {
            if sink.wants(x) {
                let gx = sink.buf(x, xv.shape());
                gemm(F::one(), g.data(), MatView::dense(0, m, n), wv.data(), MatView::dense(0, k, n).t(), F::one(), gx, MatView::dense(0, m, k));
            }
            if sink.wants(w) {
                let gw = sink.buf(w, wv.shape());
                gemm(F::one(), xv.data(), MatView::dense(0, m, k).t(), g.data(), MatView::dense(0, m, n), F::one(), gw, MatView::dense(0, k, n));
            }
            if let Some(b) = b {
                if sink.wants(b) {
                    let gb = sink.buf(b, &[n]);
                    for row in g.data().chunks(n) {
                        for (x, &v) in gb.iter_mut().zip(row) {
                            *x += v;
                        }
                    }
                }
            }
        })
    }

    /// Multi-head scaled dot-product attention, fused over heads.
    ///
    /// `q: [B, Tq, D]`, `k, v: [B, Tk, D]`. With `causal`, query `i` sees keys
    /// `j <= i + (Tk - Tq)`.
    pub fn attention(&self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (bq, tq, d) = dims3(&qv, "attention q");
        let (bk, tk, dk) = dims3(&kv, "attention k");
        assert_eq!(kv.shape(), vv.shape(), "attention k/v shape mismatch");
        assert!(bq == bk && d == dk, "attention q/k mismatch {:?} {:?}", qv.shape(), kv.shape());
        assert!(heads > 0 && d % heads == 0, "attention: {d} not divisible by {heads} heads");
        let dh = d / heads;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let shift = tk as isize - tq as isize;
        let mut probs = vec![F::zero(); bq * heads * tq * tk];
        let mut out = vec![F::zero(); bq * tq * d];
        for b in 0..bq {
            for h in 0..heads {
                let qvw = MatView { offset: b * tq * d + h * dh, rows: tq, cols: dh, row_stride: d, col_stride: 1 };
                let kvw = MatView { offset: b * tk * d + h * dh, rows: tk, cols: dh, row_stride: d, col_stride: 1 };
                let p_off = (b * heads + h) * tq * tk;
                gemm(scale, qv.data(), qvw, kv.data(), kvw.t(), F::zero(), &mut probs, MatView::dense(p_off, tq, tk));
                for i in 0..tq {
                    let row = &mut probs[p_off + i * tk..p_off + (i + 1) * tk];
                    let limit = if causal { ((i as isize + shift + 1).max(0) as usize).min(tk) } else { tk };
                    softmax_in_place(&mut row[..limit]);
                    for x in &mut row[limit..] {
                        *x = F::zero();
                    }
                }
                gemm(F::one(), &probs, MatView::dense(p_off, tq, tk), vv.data(), kvw, F::zero(), &mut out, qvw);
            }
        }
        let probs = Arc::new(probs);
        self.push(Tensor::new(qv.shape(), out), &[q, k, v], move |g, sink| {
            let (wq, wk, wv) = (sink.wants(q), sink.wants(k), sink.wants(v));
            let mut dq = if wq { vec![F::zero(); qv.numel()] } else { Vec::new() };
            let mut dk = if wk { vec![F::zero(); kv.numel()] } else { Vec::new() };
            let mut dv = if wv { vec![F::zero(); vv.numel()] } else { Vec::new() };
            let mut dp = vec![F::zero(); tq * tk];
            for b in 0..bq {
                for h in 0..heads {
                    let qvw = MatView { offset: b * tq * d + h * dh, rows: tq, cols: dh, row_stride: d, col_stride: 1 };
                    let kvw = MatView { offset: b * tk * d + h * dh, rows: tk, cols: dh, row_stride: d, col_stride: 1 };
                    let p_off = (b * heads + h) * tq * tk;
                    let pview = MatView::dense(p_off, tq, tk);
                    if wv {
                        gemm(F::one(), &probs, pview.t(), g.data(), qvw, F::one(), &mut dv, kvw);
                    }
                    if !(wq || wk) {
                        continue;
                    }
                    gemm(F::one(), g.data(), qvw, vv.data(), kvw.t(), F::zero(), &mut dp, MatView::dense(0, tq, tk));
                    for i in 0..tq {
                        let prow = &probs[p_off + i * tk..p_off + (i + 1) * tk];
                        let drow = &mut dp[i * tk..(i + 1) * tk];
                        let dot: F = prow.iter().zip(drow.iter()).map(|(&p, &dd)| p * dd).sum();
                        for (dd, &p) in drow.iter_mut().zip(prow) {
                            *dd = p * (*dd - dot);
                        }
                    }
                    if wq {
                        gemm(scale, &dp, MatView::dense(0, tq, tk), kv.data(), kvw, F::one(), &mut dq, qvw);
                    }
                    if wk {
                        gemm(scale, &dp, MatView::dense(0, tq, tk).t(), qv.data(), qvw, F::one(), &mut dk, kvw);
                    }
                }
            }
            if wq {
                sink.add(q, Tensor::new(qv.shape(), dq));
            }
            if wk {
                sink.add(k, Tensor::new(kv.shape(), dk));
            }
            if wv {
                sink.add(v, Tensor::new(vv.shape(), dv));
            }
        })
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let n = xv.last_dim();
        assert_eq!(gv.shape(), [n], "layer_norm gamma shape");
        assert_eq!(bv.shape(), [n], "layer_norm beta shape");
        let rows = xv.rows();
        let eps = F::from_f64(eps);
        let nf = F::from_f64(n as f64);
        let mut xhat = vec![F::zero(); xv.numel()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        self.push(Tensor::new(xv.shape(), out), &[x, gamma, beta], move |g, sink| {
            if sink.wants(gamma) {
                let gg = sink.buf(gamma, &[n]);
                for (grow, hrow) in g.data().chunks(n).zip(xhat.chunks(n)) {
                    for j in 0..n {
                        gg[j] += grow[j] * hrow[j];
                    }
                }
            }
            if sink.wants(beta) {
                let gb = sink.buf(beta, &[n]);
                for grow in g.data().chunks(n) {
                    for j in 0..n {
                        gb[j] += grow[j];
                    }
                }
            }
            if sink.wants(x) {
                let gx = sink.buf(x, xv.shape());
                let mut dxhat = vec![F::zero(); n];
                for r in 0..rows {
                    let grow = &g.data()[r * n..(r + 1) * n];
                    let hrow = &xhat[r * n..(r + 1) * n];
                    let mut m1 = F::zero();
                    let mut m2 = F::zero();
                    for j in 0..n {
                        dxhat[j] = grow[j] * gv.data()[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * hrow[j];
                    }
                    m1 /= nf;
                    m2 /= nf;
                    for j in 0..n {
                        gx[r * n + j] += rstd[r] * (dxhat[j] - m1 - hrow[j] * m2);
                    }
                }
            }
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: Var) -> Var {
        let xv = self.value(x);
        let c = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let a = F::from_f64(0.044715);
        let half = F::from_f64(0.5);
        let out = xv.map(|v| half * v * (F::one() + tanh_exp(c * (v + a * v * v * v))));
        self.push(out, &[x], move |g, sink| {
            let three = F::from_f64(3.0);
            let gx = sink.buf(x, xv.shape());
            for ((o, &v), &gv) in gx.iter_mut().zip(xv.data()).zip(g.data()) {
                let t = tanh_exp(c * (v + a * v * v * v));
                let d = half * (F::one() + t) + half * v * (F::one() - t * t) * c * (F::one() + three * a * v * v);
                *o += gv * d;
            }
        })
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let y = Arc::new(out.clone());
        self.push(out, &[x], move |g, sink| {
            let gx = sink.buf(x, y.shape());
            for ((o, &s), &gv) in gx.iter_mut().zip(y.data()).zip(g.data()) {
                *o += gv * s * (F::one() - s);
            }
        })
    }

    /// Clamps into `[lo, hi]`; the gradient is passed through inside the range.
    pub fn clamp(&self, x: Var, lo: F, hi: F) -> Var {
        let xv = self.value(x);
        let out = xv.map(|v| v.max(lo).min(hi));
        self.push(out, &[x], move |g, sink| {
            let gx = sink.buf(x, xv.shape());
            for ((o, &v), &gv) in gx.iter_mut().zip(xv.data()).zip(g.data()) {
                if v >= lo && v <= hi {
                    *o += gv;
                }
            }
        })
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let xv = self.value(x);
        let old = xv.shape().to_vec();
        let out = xv.as_ref().clone().reshape(shape);
        self.push(out, &[x], move |g, sink| sink.add(x, g.clone().reshape(&old)))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let vals: Vec<Arc<Tensor<F>>> = parts.iter().map(|&p| self.value(p)).collect();
        let base = vals[0].shape().to_vec();
        assert!(axis < base.len(), "concat axis out of range");
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut widths = Vec::with_capacity(vals.len());
        for v in &vals {
            let s = v.shape();
            assert!(s.len() == base.len() && s[..axis] == base[..axis] && s[axis + 1..] == base[axis + 1..], "concat shape mismatch {:?} vs {:?}", s, base);
            widths.push(s[axis] * inner);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (v, &w) in vals.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total / inner.max(1);
        let parts = parts.to_vec();
        let shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape().to_vec()).collect();
        self.push(Tensor::new(&shape, out), &parts.clone(), move |g, sink| {
            let mut off = 0;
            for ((&p, &w), s) in parts.iter().zip(&widths).zip(&shapes) {
                if sink.wants(p) {
                    let gp = sink.buf(p, s);
                    for o in 0..outer {
                        let src = &g.data()[o * total + off..o * total + off + w];
                        for (x, &v) in gp[o * w..(o + 1) * w].iter_mut().zip(src) {
                            *x += v;
                        }
                    }
                }
                off += w;
            }
        })
    }

    /// `[start, start + len)` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        assert!(axis < s.len() && start + len <= s[axis], "slice out of range: {s:?} axis {axis} [{start}, +{len})");
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let full = s[axis] * inner;
        let w = len * inner;
        let mut out = Vec::with_capacity(outer * w);
        for o in 0..outer {
            out.extend_from_slice(&xv.data()[o * full + start * inner..o * full + start * inner + w]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        self.push(Tensor::new(&shape, out), &[x], move |g, sink| {
            let gx = sink.buf(x, &s);
            for o in 0..outer {
                let dst = &mut gx[o * full + start * inner..o * full + start * inner + w];
                for (d, &v) in dst.iter_mut().zip(&g.data()[o * w..(o + 1) * w]) {
                    *d += v;
                }
            }
        })
    }

    /// Row gather from `table: [V, d]`; result `[ids.len(), d]`.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Var {
        self.select_rows(table, ids)
    }

    /// Gathers rows of a tensor viewed as `[rows, last_dim]`.
    pub fn select_rows(&self, x: Var, rows: &[usize]) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let nrows = xv.rows();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            assert!(r < nrows, "select_rows: row {r} out of {nrows}");
            out.extend_from_slice(&xv.data()[r * d..(r + 1) * d]);
        }
        let rows = rows.to_vec();
        self.push(Tensor::new(&[rows.len(), d], out), &[x], move |g, sink| {
            let gx = sink.buf(x, xv.shape());
            for (i, &r) in rows.iter().enumerate() {
                for (a, &v) in gx[r * d..(r + 1) * d].iter_mut().zip(&g.data()[i * d..(i + 1) * d]) {
                    *a += v;
                }
            }
        })
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let out = Tensor::scalar(xv.sum());
        self.push(out, &[x], move |g, sink| {
            let gv = g.item();
            for o in sink.buf(x, &shape) {
                *o += gv;
            }
        })
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum_all(x);
        self.scale(s, F::from_f64(1.0 / n as f64))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&self, x: Var, axis: usize) -> Var {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        assert!(axis < s.len(), "mean_axis out of range");
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let n = s[axis];
        let inv = F::from_f64(1.0 / n as f64);
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let src = &xv.data()[(o * n + a) * inner..(o * n + a + 1) * inner];
                for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += v * inv;
                }
            }
        }
        let mut shape = s.clone();
        shape.remove(axis);
        self.push(Tensor::new(&shape, out), &[x], move |g, sink| {
            let gx = sink.buf(x, &s);
            for o in 0..outer {
                let gsrc = &g.data()[o * inner..(o + 1) * inner];
                for a in 0..n {
                    for (d, &v) in gx[(o * n + a) * inner..(o * n + a + 1) * inner].iter_mut().zip(gsrc) {
                        *d += v * inv;
                    }
                }
            }
        })
    }

    /// Adaptive average pooling of a channels-last grid `[B, H, W, C]` to
    /// `[B, oh, ow, C]`. Cell `i` spans `[floor(i*H/oh), ceil((i+1)*H/oh))`.
    pub fn adaptive_avg_pool2d(&self, x: Var, oh: usize, ow: usize) -> Var {
        let xv = self.value(x);
        let (b, h, w, c) = dims4(&xv, "adaptive_avg_pool2d");
        assert!(oh >= 1 && ow >= 1 && oh <= h && ow <= w, "pool size {oh}x{ow} exceeds grid {h}x{w}");
        let cells = pool_cells(h, w, oh, ow);
        let mut out = vec![F::zero(); b * oh * ow * c];
        for bi in 0..b {
            for (ci, cell) in cells.iter().enumerate() {
                let inv = F::from_f64(1.0 / cell.count() as f64);
                let dst = (bi * oh * ow + ci) * c;
                for y in cell.y0..cell.y1 {
                    for xx in cell.x0..cell.x1 {
                        let src = ((bi * h + y) * w + xx) * c;
                        for k in 0..c {
                            out[dst + k] += xv.data()[src + k] * inv;
                        }
                    }
                }
            }
        }
        self.push(Tensor::new(&[b, oh, ow, c], out), &[x], move |g, sink| {
            let gx = sink.buf(x, xv.shape());
            for bi in 0..b {
                for (ci, cell) in cells.iter().enumerate() {
                    let inv = F::from_f64(1.0 / cell.count() as f64);
                    let src = (bi * oh * ow + ci) * c;
                    for y in cell.y0..cell.y1 {
                        for xx in cell.x0..cell.x1 {
                            let dst = ((bi * h + y) * w + xx) * c;
                            for k in 0..c {
                                gx[dst + k] += g.data()[src + k] * inv;
                            }
                        }
                    }
                }
            }
        })
    }

    /// Depthwise 2-D convolution, channels-last, zero "same" padding.
    /// `x: [B, H, W, C]`, `w: [K, K, C]` with odd `K`, `bias: [C]`.
    pub fn dwconv2d(&self, x: Var, wt: Var, bias: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(wt), self.value(bias));
        let (b, h, w, c) = dims4(&xv, "dwconv2d");
        let ks = wv.shape()[0];
        assert!(wv.shape() == [ks, ks, c] && ks % 2 == 1, "dwconv2d kernel shape {:?}", wv.shape());
        assert_eq!(bv.shape(), [c], "dwconv2d bias shape");
        let r = (ks / 2) as isize;
        let mut out = vec![F::zero(); xv.numel()];
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let dst = ((bi * h + y) * w + xx) * c;
                    out[dst..dst + c].copy_from_slice(bv.data());
                    for ky in 0..ks {
                        let sy = y as isize + ky as isize - r;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..ks {
                            let sx = xx as isize + kx as isize - r;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let src = ((bi * h + sy as usize) * w + sx as usize) * c;
                            let wo = (ky * ks + kx) * c;
                            let (o, xs, ws) = (&mut out[dst..dst + c], &xv.data()[src..src + c], &wv.data()[wo..wo + c]);
                            for k in 0..c {
                                o[k] += xs[k] * ws[k];
                            }
                        }
                    }
                }
            }
        }
        self.push(Tensor::new(xv.shape(), out), &[x, wt, bias], move |g, sink| {
            if sink.wants(bias) {
                let gb = sink.buf(bias, &[c]);
                for row in g.data().chunks(c) {
                    for k in 0..c {
                        gb[k] += row[k];
                    }
                }
            }
            let (want_x, want_w) = (sink.wants(x), sink.wants(wt));
            let mut gx = if want_x { vec![F::zero(); xv.numel()] } else { Vec::new() };
            let mut gw = if want_w { vec![F::zero(); wv.numel()] } else { Vec::new() };
            if want_x || want_w {
                for bi in 0..b {
                    for y in 0..h {
                        for xx in 0..w {
                            let dst = ((bi * h + y) * w + xx) * c;
                            let go = &g.data()[dst..dst + c];
                            for ky in 0..ks {
                                let sy = y as isize + ky as isize - r;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for kx in 0..ks {
                                    let sx = xx as isize + kx as isize - r;
                                    if sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    let src = ((bi * h + sy as usize) * w + sx as usize) * c;
                                    let wo = (ky * ks + kx) * c;
                                    if want_x {
                                        let ws = &wv.data()[wo..wo + c];
                                        for k in 0..c {
                                            gx[src + k] += go[k] * ws[k];
                                        }
                                    }
                                    if want_w {
                                        let xs = &xv.data()[src..src + c];
                                        for k in 0..c {
                                            gw[wo + k] += go[k] * xs[k];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if want_x {
                sink.add(x, Tensor::new(xv.shape(), gx));
            }
            if want_w {
                sink.add(wt, Tensor::new(wv.shape(), gw));
            }
        })
    }

    /// Nearest-neighbour 2x upsampling of `[B, H, W, C]`.
    pub fn upsample2x(&self, x: Var) -> Var {
        let xv = self.value(x);
        let (b, h, w, c) = dims4(&xv, "upsample2x");
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![F::zero(); b * h2 * w2 * c];
        for bi in 0..b {
            for y in 0..h2 {
                for xx in 0..w2 {
                    let src = ((bi * h + y / 2) * w + xx / 2) * c;
                    let dst = ((bi * h2 + y) * w2 + xx) * c;
                    out[dst..dst + c].copy_from_slice(&xv.data()[src..src + c]);
                }
            }
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(&[b, h2, w2, c], out), &[x], move |g, sink| {
            let gx = sink.buf(x, &shape);
            for bi in 0..b {
                for y in 0..h2 {
                    for xx in 0..w2 {
                        let src = ((bi * h + y / 2) * w + xx / 2) * c;
                        let dst = ((bi * h2 + y) * w2 + xx) * c;
                        for k in 0..c {
                            gx[src + k] += g.data()[dst + k];
                        }
                    }
                }
            }
        })
    }

    /// Depth-to-space 2x upsampling: `[B, H, W, 4C] -> [B, 2H, 2W, C]`.
    /// Channel block `2*dy + dx` fills sub-pixel `(dy, dx)`.
    pub fn pixel_shuffle2x(&self, x: Var) -> Var {
        let xv = self.value(x);
        let (b, h, w, c4) = dims4(&xv, "pixel_shuffle2x");
        assert!(c4 % 4 == 0, "pixel_shuffle2x needs a channel count divisible by 4, got {c4}");
        let c = c4 / 4;
        let (h2, w2) = (2 * h, 2 * w);
        let index = move |bi: usize, y: usize, xx: usize| {
            let src = ((bi * h + y / 2) * w + xx / 2) * c4 + (2 * (y % 2) + xx % 2) * c;
            let dst = ((bi * h2 + y) * w2 + xx) * c;
            (src, dst)
        };
        let mut out = vec![F::zero(); b * h2 * w2 * c];
        for bi in 0..b {
            for y in 0..h2 {
                for xx in 0..w2 {
                    let (src, dst) = index(bi, y, xx);
                    out[dst..dst + c].copy_from_slice(&xv.data()[src..src + c]);
                }
            }
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(&[b, h2, w2, c], out), &[x], move |g, sink| {
            let gx = sink.buf(x, &shape);
            for bi in 0..b {
                for y in 0..h2 {
                    for xx in 0..w2 {
                        let (src, dst) = index(bi, y, xx);
                        for k in 0..c {
                            gx[src + k] += g.data()[dst + k];
                        }
                    }
                }
            }
        })
    }

    /// Mean softmax cross-entropy of `logits: [N, V]` against class indices.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        let v = lv.last_dim();
        let n = lv.rows();
        assert_eq!(n, targets.len(), "cross_entropy: {n} rows vs {} targets", targets.len());
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0f64;
        for (row, &t) in probs.chunks_mut(v).zip(targets) {
            assert!(t < v, "cross_entropy target {t} outside vocabulary {v}");
            let lse = log_sum_exp(row);
            loss -= (row[t] - lse).as_f64();
            softmax_in_place(row);
        }
        let out = Tensor::scalar(F::from_f64(loss / n.max(1) as f64));
        let targets = targets.to_vec();
        self.push(out, &[logits], move |g, sink| {
            let scale = g.item() / F::from_f64(n.max(1) as f64);
            let gl = sink.buf(logits, lv.shape());
            for (r, &t) in targets.iter().enumerate() {
                for j in 0..v {
                    let ind = if j == t { F::one() } else { F::zero() };
                    gl[r * v + j] += scale * (probs[r * v + j] - ind);
                }
            }
        })
    }

    /// Equal-weight mean of soft-Dice loss and binary cross-entropy, computed
    /// from logits. `logits, masks: [B, P]`; Dice is per-sample (smoothing
    /// `eps` in numerator and denominator) and averaged over the batch; BCE is
    /// averaged over all pixels.
    pub fn dice_ce_with_logits(&self, logits: Var, masks: &Tensor<F>, eps: f64) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), masks.shape(), "dice_ce shape mismatch");
        let (b, p) = (lv.shape()[0], lv.numel() / lv.shape()[0].max(1));
        let probs: Vec<F> = lv.data().iter().map(|&z| sigmoid(z)).collect();
        let mut bce = 0.0f64;
        for (&z, &m) in lv.data().iter().zip(masks.data()) {
            let z = z.as_f64();
            let m = m.as_f64();
            // log(1 + e^z) - m z, stable form
            bce += z.max(0.0) - m * z + (-z.abs()).exp().ln_1p();
        }
        bce /= (b * p).max(1) as f64;
        let mut dice = 0.0f64;
        let mut stats = Vec::with_capacity(b);
        for i in 0..b {
            let pr = &probs[i * p..(i + 1) * p];
            let mk = &masks.data()[i * p..(i + 1) * p];
            let inter: f64 = pr.iter().zip(mk).map(|(&a, &m)| a.as_f64() * m.as_f64()).sum();
            let denom: f64 = pr.iter().map(|v| v.as_f64()).sum::<f64>() + mk.iter().map(|v| v.as_f64()).sum::<f64>();
            dice += 1.0 - (2.0 * inter + eps) / (denom + eps);
            stats.push((inter, denom));
        }
        dice /= b.max(1) as f64;
        let out = Tensor::scalar(F::from_f64(0.5 * dice + 0.5 * bce));
        let masks = masks.clone();
        self.push(out, &[logits], move |g, sink| {
            let gs = g.item().as_f64();
            let gl = sink.buf(logits, lv.shape());
            let n_pix = (b * p).max(1) as f64;
            for i in 0..b {
                let (inter, denom) = stats[i];
                let num = 2.0 * inter + eps;
                let den = denom + eps;
                for j in 0..p {
                    let idx = i * p + j;
                    let s = probs[idx].as_f64();
                    let m = masks.data()[idx].as_f64();
                    // d(dice)/dp = -(2m * den - num) / den^2
                    let ddice_dp = -(2.0 * m * den - num) / (den * den);
                    let dl_dp = 0.5 * ddice_dp / b.max(1) as f64;
                    let dl_dz = dl_dp * s * (1.0 - s) + 0.5 * (s - m) / n_pix;
                    gl[idx] += F::from_f64(gs * dl_dz);
                }
            }
        })
    }
}

/// `tanh` through a single `exp`; noticeably cheaper than libm's `tanhf`.
#[inline]
fn tanh_exp<F: Float>(u: F) -> F {
    let two = F::one() + F::one();
    F::one() - two / ((two * u).exp() + F::one())
}

pub fn sigmoid<F: Float>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

fn log_sum_exp<F: Float>(row: &[F]) -> F {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<F>().ln()
}

pub(crate) fn softmax_in_place<F: Float>(row: &mut [F]) {
    if row.is_empty() {
        return;
    }
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut s = F::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn dims3<F: Float>(t: &Tensor<F>, what: &str) -> (usize, usize, usize) {
    match *t.shape() {
        [a, b, c] => (a, b, c),
        ref s => panic!("{what}: expected 3-D tensor, got {s:?}"),
    }
}

fn dims4<F: Float>(t: &Tensor<F>, what: &str) -> (usize, usize, usize, usize) {
    match *t.shape() {
        [a, b, c, d] => (a, b, c, d),
        ref s => panic!("{what}: expected 4-D tensor, got {s:?}"),
    }
}

#[derive(Clone, Copy, Debug)]
struct PoolCell {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
}

impl PoolCell {
    fn count(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }
}

fn pool_cells(h: usize, w: usize, oh: usize, ow: usize) -> Vec<PoolCell> {
    let mut cells = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            cells.push(PoolCell {
                y0: i * h / oh,
                y1: ((i + 1) * h).div_ceil(oh),
                x0: j * w / ow,
                x1: ((j + 1) * w).div_ceil(ow),
            });
        }
    }
    cells
}
