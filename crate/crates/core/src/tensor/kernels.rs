// Raw forward/backward kernels over row-major f64 slices.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Output shape for a broadcasting binary op, or `None` if the shapes do not
/// conform. The smaller operand must be a scalar or a trailing suffix of the
/// larger one, so it repeats with period equal to its own length.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        return Some(a.to_vec());
    }
    if b.is_empty() && nb == 1 {
        return Some(a.to_vec());
    }
    if a.is_empty() && na == 1 {
        return Some(b.to_vec());
    }
    if b.len() < a.len() && a.ends_with(b) {
        return Some(a.to_vec());
    }
    if a.len() < b.len() && b.ends_with(a) {
        return Some(b.to_vec());
    }
    None
}

pub(crate) fn add(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let (na, nb) = (a.len(), b.len());
    (0..n).map(|i| a[i % na] + b[i % nb]).collect()
}

pub(crate) fn mul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let (na, nb) = (a.len(), b.len());
    (0..n).map(|i| a[i % na] * b[i % nb]).collect()
}

/// Sums `g` down to a buffer of length `n` with periodic indexing.
pub(crate) fn reduce_periodic(g: &[f64], n: usize) -> Vec<f64> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![0.0; n];
    for (i, v) in g.iter().enumerate() {
        out[i % n] += v;
    }
    out
}

pub(crate) fn mul_backward(g: &[f64], other: &[f64], n_self: usize) -> Vec<f64> {
    let no = other.len();
    let mut out = vec![0.0; n_self];
    for (i, gi) in g.iter().enumerate() {
        out[i % n_self] += gi * other[i % no];
    }
    out
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    c
}

/// Gradients of `c = a·b` given `g = dL/dc`.
pub(crate) fn matmul_backward(a: &[f64], b: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut da = vec![0.0; m * k];
    let mut db = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            let aip = a[i * k + p];
            if aip != 0.0 {
                let dbrow = &mut db[p * n..(p + 1) * n];
                for (d, gj) in dbrow.iter_mut().zip(grow) {
                    *d += aip * gj;
                }
            }
        }
    }
    (da, db)
}

/// Splits a shape around `axis` into (outer, extent, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn concat(parts: &[(&[f64], usize)], outer: usize, inner: usize) -> Vec<f64> {
    let total: usize = parts.iter().map(|(_, e)| e).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (data, extent) in parts {
            let block = extent * inner;
            out.extend_from_slice(&data[o * block..(o + 1) * block]);
        }
    }
    out
}

pub(crate) fn slice(data: &[f64], outer: usize, extent: usize, inner: usize, start: usize, end: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(outer * (end - start) * inner);
    for o in 0..outer {
        let base = o * extent * inner;
        out.extend_from_slice(&data[base + start * inner..base + end * inner]);
    }
    out
}

pub(crate) fn slice_backward(
    g: &[f64],
    outer: usize,
    extent: usize,
    inner: usize,
    start: usize,
    end: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; outer * extent * inner];
    let width = (end - start) * inner;
    for o in 0..outer {
        let base = o * extent * inner + start * inner;
        out[base..base + width].copy_from_slice(&g[o * width..(o + 1) * width]);
    }
    out
}

pub(crate) fn transpose_last2(data: &[f64], batch: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for bidx in 0..batch {
        let base = bidx * rows * cols;
        for r in 0..rows {
            for c in 0..cols {
                out[base + c * rows + r] = data[base + r * cols + c];
            }
        }
    }
    out
}

pub(crate) fn mean_axis(data: &[f64], outer: usize, extent: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for e in 0..extent {
            let src = &data[(o * extent + e) * inner..(o * extent + e + 1) * inner];
            for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let scale = 1.0 / extent as f64;
    out.iter_mut().for_each(|v| *v *= scale);
    out
}

pub(crate) fn mean_axis_backward(g: &[f64], outer: usize, extent: usize, inner: usize) -> Vec<f64> {
    let scale = 1.0 / extent as f64;
    let mut out = Vec::with_capacity(outer * extent * inner);
    for o in 0..outer {
        for _ in 0..extent {
            out.extend(g[o * inner..(o + 1) * inner].iter().map(|v| v * scale));
        }
    }
    out
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row softmax over the last axis. `mask` is added to the logits and either
/// matches the full buffer or one row (broadcast over all rows).
pub(crate) fn softmax_rows(data: &[f64], cols: usize, mask: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (r, (src, dst)) in data.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let m = mask.map(|m| {
            if m.len() == cols {
                m
            } else {
                &m[r * cols..(r + 1) * cols]
            }
        });
        for (j, d) in dst.iter_mut().enumerate() {
            *d = src[j] + m.map_or(0.0, |m| m[j]);
        }
        let max = dst.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for d in dst.iter_mut() {
            *d = (*d - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

pub(crate) fn softmax_backward(y: &[f64], g: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(out.chunks_mut(cols)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, yi), gi) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yi * (gi - dot);
        }
    }
    out
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(crate) fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let cols = gamma.len();
    let mut out = vec![0.0; x.len()];
    for (xr, yr) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let (mean, rstd) = row_stats(xr, eps);
        for j in 0..cols {
            yr[j] = gamma[j] * (xr[j] - mean) * rstd + beta[j];
        }
    }
    out
}

/// Returns (dx, dgamma, dbeta).
pub(crate) fn layer_norm_backward(x: &[f64], gamma: &[f64], g: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cols = gamma.len();
    let n = cols as f64;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; cols];
    let mut dbeta = vec![0.0; cols];
    let mut xhat = vec![0.0; cols];
    let mut dxhat = vec![0.0; cols];
    for ((xr, gr), dxr) in x.chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols)) {
        let (mean, rstd) = row_stats(xr, eps);
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for j in 0..cols {
            xhat[j] = (xr[j] - mean) * rstd;
            dxhat[j] = gr[j] * gamma[j];
            dgamma[j] += gr[j] * xhat[j];
            dbeta[j] += gr[j];
            sum_d += dxhat[j];
            sum_dx += dxhat[j] * xhat[j];
        }
        for j in 0..cols {
            dxr[j] = rstd * (dxhat[j] - sum_d / n - xhat[j] * sum_dx / n);
        }
    }
    (dx, dgamma, dbeta)
}

/// Mean cross-entropy over rows with a target; returns (loss, probabilities).
pub(crate) fn cross_entropy(logits: &[f64], classes: usize, targets: &[Option<usize>]) -> (f64, Vec<f64>) {
    let probs = softmax_rows(logits, classes, None);
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            let row = &logits[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            count += 1;
        }
    }
    (total / count as f64, probs)
}

pub(crate) fn cross_entropy_backward(probs: &[f64], classes: usize, targets: &[Option<usize>], g: f64) -> Vec<f64> {
    let count = targets.iter().filter(|t| t.is_some()).count() as f64;
    let mut out = vec![0.0; probs.len()];
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            let row = &mut out[r * classes..(r + 1) * classes];
            for (d, p) in row.iter_mut().zip(&probs[r * classes..(r + 1) * classes]) {
                *d = g * p / count;
            }
            row[t] -= g / count;
        }
    }
    out
}
