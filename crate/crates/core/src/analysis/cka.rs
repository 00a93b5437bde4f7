use std::fmt::Write as _;
use std::path::Path;

use crate::config::Pooling;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn centered(x: &Tensor, op: &'static str) -> Result<(usize, usize, Vec<f64>)> {
    if x.rank() != 2 {
        return Err(Error::invalid(
            op,
            format!("expected a matrix, got shape {:?}", x.shape()),
        ));
    }
    let (n, p) = (x.shape()[0], x.shape()[1]);
    if n < 2 {
        return Err(Error::invalid(op, "need at least 2 examples"));
    }
    let mut c = x.to_vec();
    for j in 0..p {
        let mean = (0..n).map(|i| c[i * p + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            c[i * p + j] -= mean;
        }
    }
    let raw: f64 = x.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let cen: f64 = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    if cen == 0.0 || cen <= 1e-12 * raw {
        return Err(Error::invalid(op, "feature matrix is constant across examples"));
    }
    Ok((n, p, c))
}

/// `‖AᵀB‖²_F` for row-major `n×p` and `n×q`.
fn cross_frobenius_sq(n: usize, p: usize, a: &[f64], q: usize, b: &[f64]) -> f64 {
    let mut m = vec![0.0; p * q];
    for i in 0..n {
        let ar = &a[i * p..(i + 1) * p];
        let br = &b[i * q..(i + 1) * q];
        for (j, &av) in ar.iter().enumerate() {
            let row = &mut m[j * q..(j + 1) * q];
            for (dst, &bv) in row.iter_mut().zip(br) {
                *dst += av * bv;
            }
        }
    }
    m.iter().map(|v| v * v).sum()
}

/// Linear centered kernel alignment between two `n×p` and `n×q` feature
/// matrices with examples as rows. Clamped to `[0, 1]`.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (n, p, xc) = centered(x, "linear_cka")?;
    let (m, q, yc) = centered(y, "linear_cka")?;
    if n != m {
        return Err(Error::shape("linear_cka", x.shape(), y.shape()));
    }
    let xy = cross_frobenius_sq(n, p, &xc, q, &yc);
    let xx = cross_frobenius_sq(n, p, &xc, p, &xc).sqrt();
    let yy = cross_frobenius_sq(n, q, &yc, q, &yc).sqrt();
    Ok((xy / (xx * yy)).clamp(0.0, 1.0))
}

/// Reduces per-example `S×D` sequences to one `n×D` matrix.
pub fn pool_examples(seqs: &[&Tensor], pooling: Pooling) -> Result<Tensor> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::invalid("pool_examples", "no examples"))?;
    let d = *first.shape().last().unwrap_or(&0);
    let mut out = Vec::with_capacity(seqs.len() * d);
    for s in seqs {
        if s.rank() != 2 || s.shape()[1] != d {
            return Err(Error::shape("pool_examples", first.shape(), s.shape()));
        }
        match pooling {
            Pooling::First => out.extend_from_slice(s.row(0)),
            Pooling::Mean => {
                let rows = s.shape()[0] as f64;
                out.extend((0..d).map(|j| (0..s.shape()[0]).map(|i| s.data()[i * d + j]).sum::<f64>() / rows));
            }
        }
    }
    Tensor::new(vec![seqs.len(), d], out)
}

/// `CKA(a_i, b_j)` for every layer pair. When `a` and `b` are the same
/// slice the result is filled symmetrically.
pub fn cka_layer_matrix(a: &[Tensor], b: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    let same = std::ptr::eq(a, b);
    let mut out = vec![vec![0.0; b.len()]; a.len()];
    for i in 0..a.len() {
        let start = if same { i } else { 0 };
        for j in start..b.len() {
            let v = linear_cka(&a[i], &b[j])?;
            out[i][j] = v;
            if same {
                out[j][i] = v;
            }
        }
    }
    Ok(out)
}

/// Whitespace-separated grid, one matrix row per line.
pub fn write_grid(path: &Path, grid: &[Vec<f64>], overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        return Err(Error::OutputExists(path.to_path_buf()));
    }
    let mut s = String::new();
    for row in grid {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.10}")).collect();
        let _ = writeln!(s, "{}", cells.join(" "));
    }
    std::fs::write(path, s)?;
    Ok(())
}
