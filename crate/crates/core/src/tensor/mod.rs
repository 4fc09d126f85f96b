//! Dense row-major tensors with reverse-mode gradient accumulation.
//!
//! A [`Graph`] owns an arena of tensors plus a tape of executed operations.
//! One graph and its tensors form a single-threaded session; independent
//! sessions (e.g. multi-seed sweeps) may run in parallel. Gradients
//! accumulate across backward calls; the caller zeroes them between steps.

mod graph;

pub use graph::{Graph, Op};

use crate::scalar::Scalar;

/// Handle to a tensor inside a [`Graph`] arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Dense tensor: shape, row-major values, optional accumulated gradient.
#[derive(Debug, Clone)]
pub struct Tensor<S: Scalar> {
    pub(crate) shape: Vec<usize>,
    pub(crate) values: Vec<S>,
    pub(crate) grad: Option<Vec<S>>,
    pub(crate) requires_grad: bool,
}

impl<S: Scalar> Tensor<S> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Rows of a 2-D tensor.
    pub(crate) fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub(crate) fn cols(&self) -> usize {
        self.shape[1]
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}
