use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference stencil used by [`finite_difference_stencil`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, error O(h²).
    #[default]
    TwoPoint,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, error O(h⁴).
    FourPoint,
}

/// Central-difference gradient of a scalar function at `x`.
///
/// Evaluates `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)` for each coordinate
/// listed in `coords` (all coordinates when `None`). Coordinates not listed
/// are left at zero in the returned tensor.
pub fn finite_difference_gradient<F>(f: F, x: &Tensor, eps: f64, coords: Option<&[usize]>) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    finite_difference_stencil(f, x, eps, coords, Stencil::TwoPoint)
}

pub fn finite_difference_stencil<F>(
    mut f: F,
    x: &Tensor,
    eps: f64,
    coords: Option<&[usize]>,
    stencil: Stencil,
) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(
            "finite_difference",
            format!("eps must be > 0, got {eps}"),
        ));
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.detach();
    for &i in coords {
        let orig = x.data()[i];
        let mut at = |offset: f64| -> Result<f64> {
            probe.data_mut()[i] = orig + offset;
            let v = f(&probe)?;
            probe.data_mut()[i] = orig;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite {
                    op: "finite_difference",
                    index: i,
                })
            }
        };
        grad[i] = match stencil {
            Stencil::TwoPoint => (at(eps)? - at(-eps)?) / (2.0 * eps),
            Stencil::FourPoint => {
                let (p1, m1) = (at(eps)?, at(-eps)?);
                let (p2, m2) = (at(2.0 * eps)?, at(-2.0 * eps)?);
                (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps)
            }
        };
    }
    x.with_data(grad)
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Largest [`relative_error`] over the given coordinates (all when `None`).
pub fn max_relative_error(a: &Tensor, b: &Tensor, coords: Option<&[usize]>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    match coords {
        Some(c) => c
            .iter()
            .map(|&i| relative_error(a.data()[i], b.data()[i]))
            .fold(0.0, f64::max),
        None => a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| relative_error(*x, *y))
            .fold(0.0, f64::max),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_point_stencil_is_exact_on_quartics() {
        let x = Tensor::vector(vec![0.7, -1.3]).unwrap();
        let f = |t: &Tensor| Ok(t.data().iter().map(|v| v.powi(4)).sum());
        let g = finite_difference_stencil(f, &x, 0.1, None, Stencil::FourPoint).unwrap();
        let two = finite_difference_stencil(f, &x, 0.1, None, Stencil::TwoPoint).unwrap();
        for (i, v) in x.data().iter().enumerate() {
            let exact = 4.0 * v.powi(3);
            assert!((g.data()[i] - exact).abs() < 1e-12);
            assert!((two.data()[i] - exact).abs() > 1e-3);
        }
    }

    #[test]
    fn linear_function_gives_ones() {
        let x = Tensor::vector(vec![0.3, -2.0, 7.5]).unwrap();
        let g = finite_difference_gradient(|t| Ok(t.data().iter().sum()), &x, 1e-5, None).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::vector(vec![3.0]).unwrap();
        let g = finite_difference_gradient(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-5, None).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn reports_offending_coordinate() {
        let x = Tensor::vector(vec![1.0, 0.0]).unwrap();
        let err = finite_difference_gradient(|t| Ok(if t.data()[1] != 0.0 { f64::NAN } else { 1.0 }), &x, 1e-5, None)
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }));
        assert!(finite_difference_gradient(|_| Ok(0.0), &x, 0.0, None).is_err());
    }
}
