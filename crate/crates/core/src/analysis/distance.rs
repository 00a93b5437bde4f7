use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sequence position in grid units; text uses `(index, 0)`.
pub type Position = [f64; 2];

fn dist(a: &Position, b: &Position) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Text positions for a sequence of `len` tokens. The start token is a key
/// at index 0 and is excluded as a query.
pub fn text_positions(len: usize) -> (Vec<Option<Position>>, Vec<Position>) {
    let keys: Vec<Position> = (0..len).map(|i| [i as f64, 0.0]).collect();
    let queries = keys.iter().enumerate().map(|(i, p)| (i > 0).then_some(*p)).collect();
    (queries, keys)
}

/// Image positions for a class token followed by a `rows × cols` patch
/// grid in row-major order. The class token sits at `(0, 0)` as a key and
/// is excluded as a query.
pub fn image_positions(rows: usize, cols: usize) -> (Vec<Option<Position>>, Vec<Position>) {
    let mut keys = vec![[0.0, 0.0]];
    for r in 0..rows {
        for c in 0..cols {
            keys.push([r as f64, c as f64]);
        }
    }
    let queries = keys.iter().enumerate().map(|(i, p)| (i > 0).then_some(*p)).collect();
    (queries, keys)
}

/// Per-head mean over included queries of `Σ_k p[q,k]·dist(q, k)`.
///
/// `probs` is `heads×Sq×Sk` (or a single `Sq×Sk` head); queries whose
/// position is `None` are skipped.
pub fn avg_attention_distance(
    probs: &Tensor,
    q_positions: &[Option<Position>],
    k_positions: &[Position],
) -> Result<Vec<f64>> {
    let op = "avg_attention_distance";
    let (heads, sq, sk) = match *probs.shape() {
        [h, q, k] => (h, q, k),
        [q, k] => (1, q, k),
        _ => {
            return Err(Error::invalid(
                op,
                format!("expected heads×Sq×Sk, got {:?}", probs.shape()),
            ))
        }
    };
    if q_positions.len() != sq || k_positions.len() != sk {
        return Err(Error::invalid(
            op,
            format!(
                "{} query and {} key positions for a {sq}×{sk} map",
                q_positions.len(),
                k_positions.len()
            ),
        ));
    }
    let included = q_positions.iter().filter(|p| p.is_some()).count();
    if included == 0 {
        return Err(Error::invalid(op, "no query positions included"));
    }
    let d = probs.data();
    let mut out = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut total = 0.0;
        for (q, qp) in q_positions.iter().enumerate() {
            let row = &d[(h * sq + q) * sk..(h * sq + q + 1) * sk];
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(op, format!("head {h} row {q} sums to {sum}")));
            }
            if let Some(qp) = qp {
                total += row.iter().zip(k_positions).map(|(p, kp)| p * dist(qp, kp)).sum::<f64>();
            }
        }
        out.push(total / included as f64);
    }
    Ok(out)
}
