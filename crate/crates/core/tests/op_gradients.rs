//! Every differentiable primitive against central differences, each at
//! several random shapes.

mod common;

use std::sync::Arc;

use common::{assert_close, randn, rng, uniform};
use rand::Rng;
use vlbridge::tensor::finite_difference_gradient;
use vlbridge::{Result, Tape, Tensor};

const SHAPES: usize = 6;

/// Checks `d/dx_i Σ(f(x)⊙R)` for every input against central differences.
fn check<F>(inputs: &[Tensor], f: F, what: &str)
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    let out_shape = {
        let mut tape = Tape::new();
        f(&mut tape, inputs).unwrap().shape().to_vec()
    };
    let mut r = rng(inputs.len() as u64 + out_shape.iter().sum::<usize>() as u64);
    let weights = randn(&mut r, &out_shape);
    let objective = |tape: &mut Tape, xs: &[Tensor]| -> Result<Tensor> {
        let y = f(tape, xs)?;
        let y = tape.mul(&y, &weights)?;
        tape.sum(&y)
    };

    let mut tape = Tape::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|x| tape.leaf(x)).collect();
    let loss = objective(&mut tape, &leaves).unwrap();
    let grads = tape.backward(&loss).unwrap();

    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(&leaves[k]);
        let numeric = finite_difference_gradient(
            |probe| {
                let mut xs = inputs.to_vec();
                xs[k] = probe.clone();
                let mut t = Tape::new();
                Ok(objective(&mut t, &xs)?.item())
            },
            x,
            1e-6,
            None,
        )
        .unwrap();
        assert_close(
            analytic.data(),
            numeric.data(),
            1e-7,
            1e-5,
            &format!("{what} input {k}"),
        );
    }
}

fn dims(r: &mut impl Rng) -> (usize, usize, usize) {
    (r.random_range(1..5), r.random_range(1..6), r.random_range(1..5))
}

#[test]
fn matmul() {
    let mut r = rng(1);
    for _ in 0..SHAPES {
        let (m, k, n) = dims(&mut r);
        let a = randn(&mut r, &[m, k]);
        let b = randn(&mut r, &[k, n]);
        check(&[a, b], |t, x| t.matmul(&x[0], &x[1]), "matmul");
    }
}

#[test]
fn add_and_mul_with_broadcast() {
    let mut r = rng(2);
    for _ in 0..SHAPES {
        let (m, n, _) = dims(&mut r);
        let a = randn(&mut r, &[m, n]);
        for b in [randn(&mut r, &[m, n]), randn(&mut r, &[n]), randn(&mut r, &[])] {
            check(&[a.clone(), b.clone()], |t, x| t.add(&x[0], &x[1]), "add");
            check(&[a.clone(), b.clone()], |t, x| t.mul(&x[0], &x[1]), "mul");
            check(&[b.clone(), a.clone()], |t, x| t.mul(&x[0], &x[1]), "mul (small first)");
        }
    }
}

#[test]
fn scale_sum_transpose_reshape() {
    let mut r = rng(3);
    for _ in 0..SHAPES {
        let (a, b, c) = dims(&mut r);
        let x = randn(&mut r, &[a, b, c]);
        check(std::slice::from_ref(&x), |t, x| t.scale(&x[0], -1.7), "scale");
        check(std::slice::from_ref(&x), |t, x| t.sum(&x[0]), "sum");
        check(std::slice::from_ref(&x), |t, x| t.transpose(&x[0]), "transpose");
        check(
            std::slice::from_ref(&x),
            |t, x| t.reshape(&x[0], &[a * b, c]),
            "reshape",
        );
    }
}

#[test]
fn concat_and_slice() {
    let mut r = rng(4);
    for _ in 0..SHAPES {
        let (m, n, k) = dims(&mut r);
        let a = randn(&mut r, &[m, n]);
        let b = randn(&mut r, &[m, k]);
        let c = randn(&mut r, &[k, n]);
        check(&[a.clone(), b], |t, x| t.concat(&[&x[0], &x[1]], 1), "concat axis 1");
        check(&[a.clone(), c], |t, x| t.concat(&[&x[0], &x[1]], 0), "concat axis 0");
        let s = r.random_range(0..n);
        let e = r.random_range(s + 1..=n);
        check(std::slice::from_ref(&a), |t, x| t.slice(&x[0], 1, s, e), "slice");
    }
}

#[test]
fn mean_over_each_axis() {
    let mut r = rng(5);
    for _ in 0..SHAPES {
        let (a, b, c) = dims(&mut r);
        let x = randn(&mut r, &[a, b, c]);
        for axis in 0..3 {
            check(std::slice::from_ref(&x), |t, x| t.mean(&x[0], axis), "mean");
        }
    }
}

#[test]
fn gelu_and_sigmoid() {
    let mut r = rng(6);
    for _ in 0..SHAPES {
        let (a, b, _) = dims(&mut r);
        let x = uniform(&mut r, &[a, b], -4.0, 4.0);
        check(std::slice::from_ref(&x), |t, x| t.gelu(&x[0]), "gelu");
        check(std::slice::from_ref(&x), |t, x| t.sigmoid(&x[0]), "sigmoid");
    }
}

#[test]
fn softmax_with_and_without_mask() {
    let mut r = rng(7);
    for _ in 0..SHAPES {
        let (h, q, _) = dims(&mut r);
        let k = r.random_range(2..6);
        let x = randn(&mut r, &[h, q, k]);
        check(std::slice::from_ref(&x), |t, x| t.softmax(&x[0], None), "softmax");
        let mut row = vec![0.0; k];
        row[k - 1] = -1e9;
        let mask = Arc::new(row);
        check(
            std::slice::from_ref(&x),
            |t, x| t.softmax(&x[0], Some(mask.clone())),
            "masked softmax",
        );
        let full = Arc::new(uniform(&mut r, &[h, q, k], -2.0, 2.0).to_vec());
        check(
            std::slice::from_ref(&x),
            |t, x| t.softmax(&x[0], Some(full.clone())),
            "additive-mask softmax",
        );
    }
}

#[test]
fn layer_norm_all_inputs() {
    let mut r = rng(8);
    for _ in 0..SHAPES {
        let (m, _, _) = dims(&mut r);
        let d = r.random_range(2..7);
        let x = randn(&mut r, &[m, d]);
        let g = uniform(&mut r, &[d], 0.5, 1.5);
        let b = randn(&mut r, &[d]);
        check(&[x, g, b], |t, x| t.layer_norm(&x[0], &x[1], &x[2], 1e-5), "layer_norm");
    }
}

#[test]
fn gather_rows() {
    let mut r = rng(9);
    for _ in 0..SHAPES {
        let (v, d, s) = dims(&mut r);
        let table = randn(&mut r, &[v + 1, d]);
        let ids: Vec<usize> = (0..s + 1).map(|_| r.random_range(0..=v)).collect();
        check(std::slice::from_ref(&table), |t, x| t.gather(&x[0], &ids), "gather");
    }
}

#[test]
fn cross_entropy_with_ignored_rows() {
    let mut r = rng(10);
    for _ in 0..SHAPES {
        let (m, _, _) = dims(&mut r);
        let c = r.random_range(2..7);
        let logits = randn(&mut r, &[m + 1, c]);
        let mut targets: Vec<Option<usize>> = (0..=m)
            .map(|_| r.random_bool(0.7).then(|| r.random_range(0..c)))
            .collect();
        targets[0] = Some(r.random_range(0..c));
        check(
            std::slice::from_ref(&logits),
            |t, x| t.cross_entropy(&x[0], &targets),
            "cross_entropy",
        );
    }
}

#[test]
fn composed_graph_with_fan_out() {
    let mut r = rng(11);
    for _ in 0..SHAPES {
        let (m, k, _) = dims(&mut r);
        let x = randn(&mut r, &[m, k]);
        let w = randn(&mut r, &[k, k]);
        check(
            &[x, w],
            |t, v| {
                let h = t.matmul(&v[0], &v[1])?;
                let g = t.sigmoid(&h)?;
                let y = t.mul(&g, &h)?;
                t.add(&y, &v[0])
            },
            "composition",
        );
    }
}
