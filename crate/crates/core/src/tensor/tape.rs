use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels as k;
use super::{TapeId, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// A differentiable primitive together with its attributes.
#[derive(Clone, Debug)]
pub enum Op {
    /// `(m×k)·(k×n)`.
    MatMul,
    /// Elementwise sum; the smaller operand may be a scalar or a trailing-shape suffix.
    Add,
    /// Elementwise product with the same broadcasting rule as `Add`.
    Mul,
    /// Multiplication by a constant.
    Scale(f64),
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    Reshape(Vec<usize>),
    /// Swaps the last two axes.
    Transpose,
    Mean {
        axis: usize,
    },
    /// Sum of every element, producing a scalar.
    Sum,
    Gelu,
    Sigmoid,
    /// Softmax over the last axis after adding `mask` (one row, or the full shape).
    Softmax {
        mask: Option<Arc<Vec<f64>>>,
    },
    /// Inputs `(x, gamma, beta)`; normalizes the last axis.
    LayerNorm {
        eps: f64,
    },
    /// Row lookup into a `vocab × dim` table.
    Gather {
        ids: Arc<Vec<usize>>,
    },
    /// Mean softmax cross-entropy over rows whose target is `Some`.
    CrossEntropy {
        targets: Arc<Vec<Option<usize>>>,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::Transpose => "transpose",
            Op::Mean { .. } => "mean",
            Op::Sum => "sum",
            Op::Gelu => "gelu",
            Op::Sigmoid => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "embedding_gather",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn arity_ok(&self, n: usize) -> bool {
        match self {
            Op::MatMul | Op::Add | Op::Mul => n == 2,
            Op::LayerNorm { .. } => n == 3,
            Op::Concat { .. } => n >= 1,
            _ => n == 1,
        }
    }

    /// Evaluates the op without touching any tape.
    pub fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let name = self.name();
        if !self.arity_ok(inputs.len()) {
            return Err(Error::invalid(name, format!("got {} inputs", inputs.len())));
        }
        let x = inputs[0];
        let out = match self {
            Op::MatMul => {
                let (a, b) = (x, inputs[1]);
                if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
                    return Err(Error::shape(name, &a.shape, &b.shape));
                }
                let (m, kk, n) = (a.shape[0], a.shape[1], b.shape[1]);
                Tensor::from_parts(vec![m, n], k::matmul(a.data(), b.data(), m, kk, n))
            }
            Op::Add | Op::Mul => {
                let b = inputs[1];
                let shape =
                    k::broadcast_shape(&x.shape, &b.shape).ok_or_else(|| Error::shape(name, &x.shape, &b.shape))?;
                let n = shape.iter().product();
                let data = if matches!(self, Op::Add) {
                    k::add(x.data(), b.data(), n)
                } else {
                    k::mul(x.data(), b.data(), n)
                };
                Tensor::from_parts(shape, data)
            }
            Op::Scale(c) => Tensor::from_parts(x.shape.clone(), x.data().iter().map(|v| v * c).collect()),
            Op::Concat { axis } => {
                let axis = *axis;
                if axis >= x.rank() {
                    return Err(Error::invalid(name, format!("axis {axis} for rank {}", x.rank())));
                }
                let mut shape = x.shape.clone();
                shape[axis] = 0;
                for t in inputs {
                    let same_rank = t.rank() == x.rank();
                    let conform = same_rank
                        && t.shape
                            .iter()
                            .zip(&x.shape)
                            .enumerate()
                            .all(|(i, (a, b))| i == axis || a == b);
                    if !conform {
                        return Err(Error::shape(name, &x.shape, &t.shape));
                    }
                    shape[axis] += t.shape[axis];
                }
                let (outer, _, inner) = k::split_axis(&x.shape, axis);
                let parts: Vec<(&[f64], usize)> = inputs.iter().map(|t| (t.data(), t.shape[axis])).collect();
                Tensor::from_parts(shape, k::concat(&parts, outer, inner))
            }
            Op::Slice { axis, start, end } => {
                let (axis, start, end) = (*axis, *start, *end);
                if axis >= x.rank() || start >= end || end > x.shape[axis] {
                    return Err(Error::invalid(
                        name,
                        format!("range {start}..{end} on axis {axis} of shape {:?}", x.shape),
                    ));
                }
                let (outer, extent, inner) = k::split_axis(&x.shape, axis);
                let mut shape = x.shape.clone();
                shape[axis] = end - start;
                Tensor::from_parts(shape, k::slice(x.data(), outer, extent, inner, start, end))
            }
            Op::Reshape(shape) => {
                if shape.iter().product::<usize>() != x.numel() || shape.contains(&0) {
                    return Err(Error::shape(name, &x.shape, shape));
                }
                Tensor::from_parts(shape.clone(), x.to_vec())
            }
            Op::Transpose => {
                if x.rank() < 2 {
                    return Err(Error::invalid(name, format!("rank {} < 2", x.rank())));
                }
                let r = x.rank();
                let (rows, cols) = (x.shape[r - 2], x.shape[r - 1]);
                let batch = x.numel() / (rows * cols);
                let mut shape = x.shape.clone();
                shape.swap(r - 2, r - 1);
                Tensor::from_parts(shape, k::transpose_last2(x.data(), batch, rows, cols))
            }
            Op::Mean { axis } => {
                if *axis >= x.rank() {
                    return Err(Error::invalid(name, format!("axis {axis} for rank {}", x.rank())));
                }
                let (outer, extent, inner) = k::split_axis(&x.shape, *axis);
                let mut shape = x.shape.clone();
                shape.remove(*axis);
                Tensor::from_parts(shape, k::mean_axis(x.data(), outer, extent, inner))
            }
            Op::Sum => Tensor::scalar(x.data().iter().sum()),
            Op::Gelu => Tensor::from_parts(x.shape.clone(), x.data().iter().map(|&v| k::gelu(v)).collect()),
            Op::Sigmoid => Tensor::from_parts(x.shape.clone(), x.data().iter().map(|&v| k::sigmoid(v)).collect()),
            Op::Softmax { mask } => {
                let cols = *x.shape.last().ok_or_else(|| Error::invalid(name, "rank-0 input"))?;
                if let Some(m) = mask {
                    if m.len() != cols && m.len() != x.numel() {
                        return Err(Error::shape(name, &x.shape, &[m.len()]));
                    }
                }
                Tensor::from_parts(
                    x.shape.clone(),
                    k::softmax_rows(x.data(), cols, mask.as_deref().map(Vec::as_slice)),
                )
            }
            Op::LayerNorm { eps } => {
                let (gamma, beta) = (inputs[1], inputs[2]);
                let cols = *x.shape.last().ok_or_else(|| Error::invalid(name, "rank-0 input"))?;
                if gamma.shape != [cols] || beta.shape != [cols] {
                    return Err(Error::shape(name, &x.shape, &gamma.shape));
                }
                if !(*eps >= 0.0) {
                    return Err(Error::invalid(name, format!("eps must be ≥ 0, got {eps}")));
                }
                Tensor::from_parts(
                    x.shape.clone(),
                    k::layer_norm(x.data(), gamma.data(), beta.data(), *eps),
                )
            }
            Op::Gather { ids } => {
                if x.rank() != 2 {
                    return Err(Error::invalid(name, format!("table must be rank 2, got {:?}", x.shape)));
                }
                let (rows, dim) = (x.shape[0], x.shape[1]);
                if ids.is_empty() {
                    return Err(Error::invalid(name, "empty id list"));
                }
                let mut data = Vec::with_capacity(ids.len() * dim);
                for &id in ids.iter() {
                    if id >= rows {
                        return Err(Error::invalid(name, format!("id {id} out of range for {rows} rows")));
                    }
                    data.extend_from_slice(x.row(id));
                }
                Tensor::from_parts(vec![ids.len(), dim], data)
            }
            Op::CrossEntropy { targets } => {
                let (rows, classes) =
                    logits_dims(x).ok_or_else(|| Error::invalid(name, format!("logits shape {:?}", x.shape)))?;
                if targets.len() != rows {
                    return Err(Error::shape(name, &x.shape, &[targets.len()]));
                }
                if targets.iter().flatten().any(|&t| t >= classes) {
                    return Err(Error::invalid(name, "target class out of range"));
                }
                if targets.iter().all(Option::is_none) {
                    return Err(Error::invalid(name, "no target positions"));
                }
                Tensor::scalar(k::cross_entropy(x.data(), classes, targets).0)
            }
        };
        Ok(out)
    }

    /// Vector-Jacobian products for every input given the upstream gradient `g`.
    fn backward(&self, inputs: &[Tensor], out: &Tensor, g: &[f64]) -> Vec<Vec<f64>> {
        let x = &inputs[0];
        match self {
            Op::MatMul => {
                let b = &inputs[1];
                let (m, kk, n) = (x.shape[0], x.shape[1], b.shape[1]);
                let (da, db) = k::matmul_backward(x.data(), b.data(), g, m, kk, n);
                vec![da, db]
            }
            Op::Add => vec![
                k::reduce_periodic(g, x.numel()),
                k::reduce_periodic(g, inputs[1].numel()),
            ],
            Op::Mul => {
                let b = &inputs[1];
                vec![
                    k::mul_backward(g, b.data(), x.numel()),
                    k::mul_backward(g, x.data(), b.numel()),
                ]
            }
            Op::Scale(c) => vec![g.iter().map(|v| v * c).collect()],
            Op::Concat { axis } => {
                let (outer, _, inner) = k::split_axis(&out.shape, *axis);
                let total = out.shape[*axis];
                let mut offset = 0;
                inputs
                    .iter()
                    .map(|t| {
                        let e = t.shape[*axis];
                        let part = k::slice(g, outer, total, inner, offset, offset + e);
                        offset += e;
                        part
                    })
                    .collect()
            }
            Op::Slice { axis, start, end } => {
                let (outer, extent, inner) = k::split_axis(&x.shape, *axis);
                vec![k::slice_backward(g, outer, extent, inner, *start, *end)]
            }
            Op::Reshape(_) => vec![g.to_vec()],
            Op::Transpose => {
                let r = out.rank();
                let (rows, cols) = (out.shape[r - 2], out.shape[r - 1]);
                let batch = out.numel() / (rows * cols);
                vec![k::transpose_last2(g, batch, rows, cols)]
            }
            Op::Mean { axis } => {
                let (outer, extent, inner) = k::split_axis(&x.shape, *axis);
                vec![k::mean_axis_backward(g, outer, extent, inner)]
            }
            Op::Sum => vec![vec![g[0]; x.numel()]],
            Op::Gelu => vec![x.data().iter().zip(g).map(|(&v, gi)| gi * k::gelu_grad(v)).collect()],
            Op::Sigmoid => vec![out.data().iter().zip(g).map(|(s, gi)| gi * s * (1.0 - s)).collect()],
            Op::Softmax { .. } => {
                let cols = *out.shape.last().unwrap();
                vec![k::softmax_backward(out.data(), g, cols)]
            }
            Op::LayerNorm { eps } => {
                let (dx, dgamma, dbeta) = k::layer_norm_backward(x.data(), inputs[1].data(), g, *eps);
                vec![dx, dgamma, dbeta]
            }
            Op::Gather { ids } => {
                let dim = x.shape[1];
                let mut dt = vec![0.0; x.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for (d, gv) in dt[id * dim..(id + 1) * dim].iter_mut().zip(&g[r * dim..(r + 1) * dim]) {
                        *d += gv;
                    }
                }
                vec![dt]
            }
            Op::CrossEntropy { targets } => {
                let (_, classes) = logits_dims(x).unwrap();
                let probs = k::softmax_rows(x.data(), classes, None);
                vec![k::cross_entropy_backward(&probs, classes, targets, g[0])]
            }
        }
    }
}

fn logits_dims(x: &Tensor) -> Option<(usize, usize)> {
    match x.shape.as_slice() {
        [c] => Some((1, *c)),
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

struct Node {
    /// `None` marks a leaf.
    op: Option<Op>,
    inputs: Vec<Option<usize>>,
    values: Vec<Tensor>,
    out: Tensor,
}

/// Append-only record of differentiable operations.
///
/// A tape is single-owner; build one per training step (or per example) and
/// drop or [`clear`](Tape::clear) it after the optimizer update.
pub struct Tape {
    uid: u64,
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            uid: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Enables or disables rejection of non-finite op inputs.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Registers `t` as a differentiable leaf.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        let index = self.nodes.len();
        let value = t.detach();
        self.nodes.push(Node {
            op: None,
            inputs: Vec::new(),
            values: Vec::new(),
            out: value.clone(),
        });
        value.with_tape_id(TapeId { tape: self.uid, index })
    }

    /// Evaluates `op`, recording it when any input lives on this tape.
    pub fn apply(&mut self, op: Op, inputs: &[&Tensor]) -> Result<Tensor> {
        let mut recorded = false;
        for t in inputs {
            if let Some(id) = t.tape_id {
                if id.tape != self.uid {
                    return Err(Error::ForeignTape);
                }
                recorded = true;
            }
            if self.check_finite {
                if let Some(index) = t.data().iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: op.name(), index });
                }
            }
        }
        let out = op.forward(inputs)?;
        if !recorded {
            return Ok(out);
        }
        let index = self.nodes.len();
        self.nodes.push(Node {
            op: Some(op),
            inputs: inputs.iter().map(|t| t.tape_id.map(|id| id.index)).collect(),
            values: inputs.iter().map(|t| t.detach()).collect(),
            out: out.clone(),
        });
        Ok(out.with_tape_id(TapeId { tape: self.uid, index }))
    }

    /// Reverse sweep from a scalar root. Fan-out contributions are summed.
    pub fn backward(&self, root: &Tensor) -> Result<Gradients> {
        let id = match root.tape_id {
            Some(id) if root.numel() == 1 && root.rank() == 0 => id,
            _ => return Err(Error::NonScalarRoot(root.shape.clone())),
        };
        if id.tape != self.uid {
            return Err(Error::ForeignTape);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; id.index + 1];
        grads[id.index] = Some(vec![1.0]);
        for i in (0..=id.index).rev() {
            let node = &self.nodes[i];
            let Some(op) = &node.op else { continue };
            let Some(g) = grads[i].take() else { continue };
            let input_grads = op.backward(&node.values, &node.out, &g);
            grads[i] = Some(g);
            for (src, dg) in node.inputs.iter().zip(input_grads) {
                let Some(src) = *src else { continue };
                match &mut grads[src] {
                    Some(acc) => acc.iter_mut().zip(&dg).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(dg),
                }
            }
        }
        Ok(Gradients {
            tape: self.uid,
            shapes: self.nodes[..=id.index].iter().map(|n| n.out.shape.clone()).collect(),
            grads,
        })
    }

    // Convenience wrappers over `apply`.

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.apply(Op::Scale(c), &[a])
    }

    pub fn concat(&mut self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        self.apply(Op::Concat { axis }, parts)
    }

    pub fn slice(&mut self, a: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        self.apply(Op::Slice { axis, start, end }, &[a])
    }

    pub fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        self.apply(Op::Reshape(shape.to_vec()), &[a])
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Op::Transpose, &[a])
    }

    pub fn mean(&mut self, a: &Tensor, axis: usize) -> Result<Tensor> {
        self.apply(Op::Mean { axis }, &[a])
    }

    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Op::Sum, &[a])
    }

    pub fn gelu(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Op::Gelu, &[a])
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Op::Sigmoid, &[a])
    }

    pub fn softmax(&mut self, a: &Tensor, mask: Option<Arc<Vec<f64>>>) -> Result<Tensor> {
        self.apply(Op::Softmax { mask }, &[a])
    }

    pub fn layer_norm(&mut self, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        self.apply(Op::LayerNorm { eps }, &[x, gamma, beta])
    }

    pub fn gather(&mut self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        self.apply(
            Op::Gather {
                ids: Arc::new(ids.to_vec()),
            },
            &[table],
        )
    }

    pub fn cross_entropy(&mut self, logits: &Tensor, targets: &[Option<usize>]) -> Result<Tensor> {
        self.apply(
            Op::CrossEntropy {
                targets: Arc::new(targets.to_vec()),
            },
            &[logits],
        )
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `t`, or `None` if `t` is off-tape or unreachable from the root.
    pub fn get(&self, t: &Tensor) -> Option<Tensor> {
        let id = t.tape_id?;
        if id.tape != self.tape {
            return None;
        }
        let g = self.grads.get(id.index)?.as_ref()?;
        Some(Tensor::from_parts(self.shapes[id.index].clone(), g.clone()))
    }

    /// Like [`get`](Self::get) but yields zeros for unreachable tensors.
    pub fn get_or_zeros(&self, t: &Tensor) -> Tensor {
        self.get(t).unwrap_or_else(|| Tensor::zeros(t.shape()))
    }
}
