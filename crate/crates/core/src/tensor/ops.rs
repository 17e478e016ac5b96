//! Forward and backward kernels over raw row-major buffers.

use std::ops::Range;

use super::gemm::gemm;
use super::{Result, TensorError};

/// Resolved dimensions for `op(a) @ op(b)` with optional leading batch dims.
#[derive(Clone, Debug)]
pub(crate) struct MatMulDims {
    /// Product of the shared leading dimensions.
    pub outer: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_outer: bool,
    pub b_outer: bool,
    pub ta: bool,
    pub tb: bool,
    pub out_shape: Vec<usize>,
}

impl MatMulDims {
    pub fn resolve(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Result<Self> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        if a.len() < 2 || b.len() < 2 {
            return Err(mismatch());
        }
        let (ra, ca) = (a[a.len() - 2], a[a.len() - 1]);
        let (rb, cb) = (b[b.len() - 2], b[b.len() - 1]);
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return Err(mismatch());
        }
        let la = &a[..a.len() - 2];
        let lb = &b[..b.len() - 2];
        let lead = if la == lb || lb.is_empty() {
            la
        } else if la.is_empty() {
            lb
        } else {
            return Err(mismatch());
        };
        let mut out_shape = lead.to_vec();
        out_shape.push(m);
        out_shape.push(n);
        Ok(Self {
            outer: lead.iter().product(),
            m,
            k,
            n,
            a_outer: !la.is_empty(),
            b_outer: !lb.is_empty(),
            ta,
            tb,
            out_shape,
        })
    }

    fn a_block(&self, l: usize) -> Range<usize> {
        let sz = self.m * self.k;
        if self.a_outer {
            l * sz..(l + 1) * sz
        } else {
            0..sz
        }
    }

    fn b_block(&self, l: usize) -> Range<usize> {
        let sz = self.k * self.n;
        if self.b_outer {
            l * sz..(l + 1) * sz
        } else {
            0..sz
        }
    }

    fn c_block(&self, l: usize) -> Range<usize> {
        let sz = self.m * self.n;
        l * sz..(l + 1) * sz
    }

    /// Rows of `a` can be stacked into one tall matrix against a shared `b`.
    fn flat_rows(&self) -> bool {
        !self.b_outer && !self.ta
    }

    pub fn forward(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; self.outer * self.m * self.n];
        if self.flat_rows() && self.a_outer {
            let rows = self.outer * self.m;
            gemm(rows, self.k, self.n, a, false, b, self.tb, &mut c, false);
            return c;
        }
        for l in 0..self.outer {
            gemm(
                self.m,
                self.k,
                self.n,
                &a[self.a_block(l)],
                self.ta,
                &b[self.b_block(l)],
                self.tb,
                &mut c[self.c_block(l)],
                false,
            );
        }
        c
    }

    fn grad_a_block(&self, b: &[f64], gc: &[f64], out: &mut [f64], accumulate: bool) {
        if self.ta {
            gemm(self.k, self.n, self.m, b, self.tb, gc, true, out, accumulate);
        } else {
            gemm(self.m, self.n, self.k, gc, false, b, !self.tb, out, accumulate);
        }
    }

    fn grad_b_block(&self, a: &[f64], gc: &[f64], out: &mut [f64], accumulate: bool) {
        if self.tb {
            gemm(self.n, self.m, self.k, gc, true, a, self.ta, out, accumulate);
        } else {
            gemm(self.k, self.m, self.n, a, !self.ta, gc, false, out, accumulate);
        }
    }

    /// Gradient w.r.t. `a` over all leading blocks (summed when `a` is shared).
    pub fn grad_a(&self, b: &[f64], gc: &[f64]) -> Vec<f64> {
        if self.a_outer {
            let mut out = vec![0.0; self.outer * self.m * self.k];
            if self.flat_rows() {
                let rows = self.outer * self.m;
                gemm(rows, self.n, self.k, gc, false, b, !self.tb, &mut out, false);
                return out;
            }
            for l in 0..self.outer {
                self.grad_a_block(
                    &b[self.b_block(l)],
                    &gc[self.c_block(l)],
                    &mut out[self.a_block(l)],
                    false,
                );
            }
            out
        } else {
            self.grad_a_shared(b, gc, 0..self.outer)
        }
    }

    /// Gradient w.r.t. a shared (2-D) `a`, summed over leading blocks `ls`.
    pub fn grad_a_shared(&self, b: &[f64], gc: &[f64], ls: Range<usize>) -> Vec<f64> {
        let mut out = vec![0.0; self.m * self.k];
        for (i, l) in ls.enumerate() {
            self.grad_a_block(&b[self.b_block(l)], &gc[self.c_block(l)], &mut out, i > 0);
        }
        out
    }

    pub fn grad_b(&self, a: &[f64], gc: &[f64]) -> Vec<f64> {
        if self.b_outer {
            let mut out = vec![0.0; self.outer * self.k * self.n];
            for l in 0..self.outer {
                self.grad_b_block(
                    &a[self.a_block(l)],
                    &gc[self.c_block(l)],
                    &mut out[self.b_block(l)],
                    false,
                );
            }
            out
        } else {
            self.grad_b_shared(a, gc, 0..self.outer)
        }
    }

    /// Gradient w.r.t. a shared (2-D) `b`, summed over leading blocks `ls`.
    pub fn grad_b_shared(&self, a: &[f64], gc: &[f64], ls: Range<usize>) -> Vec<f64> {
        let mut out = vec![0.0; self.k * self.n];
        if ls.is_empty() {
            return out;
        }
        if self.a_outer && !self.ta {
            // stacked rows of a and gc for the whole range in one product
            let rows = ls.len() * self.m;
            let a_rows = ls.start * self.m * self.k..ls.end * self.m * self.k;
            let c_rows = ls.start * self.m * self.n..ls.end * self.m * self.n;
            let a = &a[a_rows];
            let gc = &gc[c_rows];
            if self.tb {
                gemm(self.n, rows, self.k, gc, true, a, false, &mut out, false);
            } else {
                gemm(self.k, rows, self.n, a, true, gc, false, &mut out, false);
            }
            return out;
        }
        for (i, l) in ls.enumerate() {
            self.grad_b_block(&a[self.a_block(l)], &gc[self.c_block(l)], &mut out, i > 0);
        }
        out
    }
}

/// Checks that `small` is a trailing suffix of `big` (or equal).
pub(crate) fn suffix_broadcast(op: &'static str, big: &[usize], small: &[usize]) -> Result<()> {
    if small.len() <= big.len() && big[big.len() - small.len()..] == *small {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: big.to_vec(),
            rhs: small.to_vec(),
        })
    }
}

pub(crate) fn broadcast_add(big: &[f64], small: &[f64]) -> Vec<f64> {
    let s = small.len();
    big.iter().enumerate().map(|(i, v)| v + small[i % s]).collect()
}

pub(crate) fn broadcast_mul(big: &[f64], small: &[f64]) -> Vec<f64> {
    let s = small.len();
    big.iter().enumerate().map(|(i, v)| v * small[i % s]).collect()
}

/// Sums `g` (laid out like the big operand) over broadcast blocks, restricted to flat range `r`.
pub(crate) fn reduce_blocks(g: &[f64], small_len: usize, r: Range<usize>) -> Vec<f64> {
    let mut out = vec![0.0; small_len];
    for (i, v) in g[r.clone()].iter().enumerate() {
        out[(r.start + i) % small_len] += v;
    }
    out
}

/// `sum over blocks of g * other` restricted to range `r`, where `other` is
/// laid out like the big operand.
pub(crate) fn reduce_blocks_mul(g: &[f64], other: &[f64], small_len: usize, r: Range<usize>) -> Vec<f64> {
    let mut out = vec![0.0; small_len];
    for i in r {
        out[i % small_len] += g[i] * other[i];
    }
    out
}

pub(crate) fn softmax_rows(x: &[f64], width: usize, mask: Option<&[bool]>) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, (xr, or)) in x.chunks(width).zip(out.chunks_mut(width)).enumerate() {
        let keep = |j: usize| mask.is_none_or(|m| m[row * width + j]);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in xr.iter().enumerate() {
            if keep(j) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            // fully masked row
            continue;
        }
        let mut total = 0.0;
        for (j, (&v, o)) in xr.iter().zip(or.iter_mut()).enumerate() {
            if keep(j) {
                *o = (v - max).exp();
                total += *o;
            }
        }
        for o in or.iter_mut() {
            *o /= total;
        }
    }
    out
}

pub(crate) fn softmax_rows_backward(p: &[f64], g: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; p.len()];
    for ((pr, gr), or) in p.chunks(width).zip(g.chunks(width)).zip(out.chunks_mut(width)) {
        let dot: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, &pv), &gv) in or.iter_mut().zip(pr).zip(gr) {
            *o = pv * (gv - dot);
        }
    }
    out
}

pub(crate) struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, LayerNormCache) {
    let d = gamma.len();
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gamma[j] + beta[j];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

pub(crate) fn layer_norm_grad_x(cache: &LayerNormCache, gamma: &[f64], g: &[f64]) -> Vec<f64> {
    let d = gamma.len();
    let mut dx = vec![0.0; g.len()];
    for (r, &rs) in cache.rstd.iter().enumerate() {
        let gr = &g[r * d..(r + 1) * d];
        let hr = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dh = 0.0;
        let mut mean_dh_h = 0.0;
        for j in 0..d {
            let dh = gr[j] * gamma[j];
            mean_dh += dh;
            mean_dh_h += dh * hr[j];
        }
        mean_dh /= d as f64;
        mean_dh_h /= d as f64;
        for j in 0..d {
            let dh = gr[j] * gamma[j];
            dx[r * d + j] = rs * (dh - mean_dh - hr[j] * mean_dh_h);
        }
    }
    dx
}

pub(crate) fn embedding(table: &[f64], dim: usize, ids: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(ids.len() * dim);
    for &id in ids {
        out.extend_from_slice(&table[id * dim..(id + 1) * dim]);
    }
    out
}

/// Scatter-add of `g` rows into a `vocab x dim` gradient, for id positions in `r`.
pub(crate) fn embedding_grad(vocab: usize, dim: usize, ids: &[usize], g: &[f64], r: Range<usize>) -> Vec<f64> {
    let mut out = vec![0.0; vocab * dim];
    for p in r {
        let id = ids[p];
        for (o, v) in out[id * dim..(id + 1) * dim].iter_mut().zip(&g[p * dim..(p + 1) * dim]) {
            *o += v;
        }
    }
    out
}

pub(crate) struct CrossEntropyCache {
    pub probs: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Mean token cross-entropy per group of `steps` rows of width `vocab`.
pub(crate) fn cross_entropy(
    logits: &[f64],
    vocab: usize,
    steps: usize,
    targets: &[usize],
    ignore: Option<usize>,
) -> Result<(Vec<f64>, CrossEntropyCache)> {
    let groups = targets.len() / steps;
    let probs = softmax_rows(logits, vocab, None);
    let mut losses = vec![0.0; groups];
    let mut counts = vec![0; groups];
    for gi in 0..groups {
        let mut total = 0.0;
        let mut count = 0;
        for t in 0..steps {
            let row = gi * steps + t;
            let target = targets[row];
            if Some(target) == ignore {
                continue;
            }
            if target >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: target,
                    bound: vocab,
                });
            }
            let lr = &logits[row * vocab..(row + 1) * vocab];
            let max = lr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + lr.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - lr[target];
            count += 1;
        }
        if count == 0 {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!("group {gi} has no target positions"),
            });
        }
        losses[gi] = total / count as f64;
        counts[gi] = count;
    }
    Ok((losses, CrossEntropyCache { probs, counts }))
}

pub(crate) fn cross_entropy_backward(
    cache: &CrossEntropyCache,
    vocab: usize,
    steps: usize,
    targets: &[usize],
    ignore: Option<usize>,
    g: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; cache.probs.len()];
    for (gi, &gv) in g.iter().enumerate() {
        let w = gv / cache.counts[gi] as f64;
        for t in 0..steps {
            let row = gi * steps + t;
            let target = targets[row];
            if Some(target) == ignore {
                continue;
            }
            let pr = &cache.probs[row * vocab..(row + 1) * vocab];
            let or = &mut out[row * vocab..(row + 1) * vocab];
            for (o, &p) in or.iter_mut().zip(pr) {
                *o = w * p;
            }
            or[target] -= w;
        }
    }
    out
}

/// Strides view of `shape` around `axis`: (outer, axis_len, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn slice_axis(x: &[f64], shape: &[usize], axis: usize, r: Range<usize>) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = Vec::with_capacity(outer * r.len() * inner);
    for o in 0..outer {
        let base = o * len * inner;
        out.extend_from_slice(&x[base + r.start * inner..base + r.end * inner]);
    }
    out
}

pub(crate) fn slice_axis_backward(g: &[f64], shape: &[usize], axis: usize, r: Range<usize>) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; outer * len * inner];
    let w = r.len() * inner;
    for o in 0..outer {
        let base = o * len * inner;
        out[base + r.start * inner..base + r.end * inner].copy_from_slice(&g[o * w..(o + 1) * w]);
    }
    out
}

/// Concatenates along the last axis. `widths[i]` is the last-axis size of part `i`.
pub(crate) fn concat_last(parts: &[&[f64]], widths: &[usize]) -> Vec<f64> {
    let total: usize = widths.iter().sum();
    let rows = parts[0].len() / widths[0];
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (p, &w) in parts.iter().zip(widths) {
            out.extend_from_slice(&p[r * w..(r + 1) * w]);
        }
    }
    out
}

pub(crate) fn concat_last_backward(g: &[f64], widths: &[usize]) -> Vec<Vec<f64>> {
    let total: usize = widths.iter().sum();
    let rows = g.len() / total;
    let mut outs: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
    for r in 0..rows {
        let mut off = r * total;
        for (o, &w) in outs.iter_mut().zip(widths) {
            o.extend_from_slice(&g[off..off + w]);
            off += w;
        }
    }
    outs
}
