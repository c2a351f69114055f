//! Dense tensors and a reverse-mode differentiation tape.
//!
//! Values are flat row-major `f64` buffers with explicit shapes. Differentiable
//! programs are built by pushing operations onto a [`Tape`]; every operation
//! validates shapes, rejects non-finite results, and records enough structure
//! to replay the chain rule in reverse. Gradients accumulate additively: each
//! call to [`Tape::backward`] adds one pass worth of gradient into the stored
//! buffers, so two passes from the same output double every leaf gradient.
//!
//! Reductions that combine values across set-like positions (softmax
//! normalisation, self-attention gathers, mean pooling over clips, and scalar
//! loss sums) can accumulate their summands in *value* order rather than index
//! order. Equal multisets of summands then produce bit-identical sums, which
//! turns reordering symmetries (query permutation, clip permutation) into
//! exact equalities in evaluation mode instead of equalities up to rounding.

mod tape;

pub mod grad_check;

pub use tape::{Tape, ValueId};

use thiserror::Error;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    /// Operand shapes are incompatible with the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    /// An operation produced (or was handed) a non-finite value.
    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },
    /// An index was outside the valid range for its axis.
    #[error("index {index} out of range in {op} (limit {limit})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        limit: usize,
    },
    /// An operation would reduce or normalise over an empty axis.
    #[error("empty axis in {op}")]
    EmptyAxis { op: &'static str },
    /// A scalar argument was outside its documented domain.
    #[error("invalid argument in {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}

/// A dense row-major tensor of `f64` values with an optional gradient buffer.
///
/// The gradient buffer is used by trainers to accumulate per-parameter
/// gradients across a batch; tape-internal gradients live on the tape nodes
/// themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor from a shape and row-major data, validating element
    /// count and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "tensor_new",
                detail: format!("shape {shape:?} wants {numel} elements, got {}", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "tensor_new" });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    /// An all-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
            grad: None,
        }
    }

    /// A rank-0 scalar.
    pub fn scalar(v: f64) -> Result<Self, TensorError> {
        Self::new(vec![], vec![v])
    }

    /// A rank-2 tensor from explicit rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(TensorError::ShapeMismatch {
                op: "tensor_from_rows",
                detail: "ragged rows".into(),
            });
        }
        Self::new(vec![r, c], rows.concat())
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// The single value of a rank-0 or one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on multi-element tensor");
        self.data[0]
    }

    /// Row count of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[0]
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    /// Element (r, c) of a rank-2 tensor.
    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    /// Row `r` of a rank-2 tensor as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        debug_assert_eq!(self.rank(), 2);
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    /// A new tensor keeping `len` rows starting at `start`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self, TensorError> {
        if self.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "slice_rows",
                detail: format!("expected rank 2, got {:?}", self.shape),
            });
        }
        if start + len > self.shape[0] {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                limit: self.shape[0],
            });
        }
        let c = self.shape[1];
        Self::new(vec![len, c], self.data[start * c..(start + len) * c].to_vec())
    }

    /// The accumulated gradient buffer, if one has been initialised.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Clears the gradient buffer to zeros (allocating it if absent).
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    /// Adds `delta`, scaled by `scale`, into the gradient buffer.
    pub fn accumulate_grad(&mut self, delta: &[f64], scale: f64) {
        debug_assert_eq!(delta.len(), self.data.len());
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        let g = self.grad.as_mut().expect("gradient buffer just initialised");
        for (dst, src) in g.iter_mut().zip(delta) {
            *dst += scale * src;
        }
    }

    /// Drops the gradient buffer entirely.
    pub fn detach_grad(&mut self) {
        self.grad = None;
    }

    /// True when every element is bitwise equal to the counterpart in `other`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Sums `buf` in ascending value order (total order over `f64`), so equal
/// multisets of summands produce bit-identical results regardless of the
/// order in which they were collected. The buffer is reordered in place.
pub(crate) fn sum_value_ordered(buf: &mut [f64]) -> f64 {
    buf.sort_unstable_by(f64::total_cmp);
    buf.iter().sum()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    debug_assert!(!xs.is_empty(), "argmax of empty slice");
    let mut best = 0;
    for (i, v) in xs.iter().enumerate().skip(1) {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_element_count() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn new_rejects_non_finite() {
        let err = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
    }

    #[test]
    fn value_ordered_sum_is_permutation_invariant() {
        let xs = [1e16, 1.0, -1e16, 3.5, 0.25, -7.125, 1e-9];
        let mut a = xs.to_vec();
        let mut b = xs.to_vec();
        b.reverse();
        b.swap(1, 4);
        let sa = sum_value_ordered(&mut a);
        let sb = sum_value_ordered(&mut b);
        assert_eq!(sa.to_bits(), sb.to_bits());
    }

    #[test]
    fn accumulate_grad_adds_scaled() {
        let mut t = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        t.accumulate_grad(&[2.0, 4.0], 0.5);
        t.accumulate_grad(&[2.0, 4.0], 0.5);
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
    }
}
