//! Dense f64 tensors with a tape-based reverse-mode differentiation engine.

mod gradcheck;
mod kernels;
mod tape;

use std::fmt;
use std::sync::Arc;

pub use gradcheck::{
    finite_difference_gradient, finite_difference_stencil, max_relative_error, relative_error, Stencil,
};
pub use tape::{Gradients, Op, Tape};

use crate::error::{Error, Result};

/// Position of a tensor's value on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TapeId {
    pub(crate) tape: u64,
    pub(crate) index: usize,
}

impl TapeId {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Row-major dense array of `f64`. Cloning is cheap: the buffer is shared.
///
/// A tensor carries an optional [`TapeId`] when it was produced by (or
/// registered on) a [`Tape`]; tensors without one never receive gradients.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    tape_id: Option<TapeId>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid("tensor", format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            tape_id: None,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
            tape_id: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(vec![n], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    /// Builds a matrix from nested rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("tensor", "ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    pub fn tape_id(&self) -> Option<TapeId> {
        self.tape_id
    }

    /// First element; the value of a scalar.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} of extent {dim}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    /// Row `r` of a matrix (rank ≥ 1: the last axis is the row).
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[r * cols..(r + 1) * cols]
    }

    /// Same value with no tape association.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            tape_id: None,
        }
    }

    /// Copy with new values and the same shape, detached from any tape.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), data)
    }

    pub(crate) fn with_tape_id(mut self, id: TapeId) -> Self {
        self.tape_id = Some(id);
        self
    }

    /// Mutable access to the buffer; copies it first if shared. Drops the tape id.
    pub fn data_mut(&mut self) -> &mut [f64] {
        self.tape_id = None;
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality of shape and values.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("tape_id", &self.tape_id)
            .finish()
    }
}
