//! Dense f32 tensors with reverse-mode autodiff on an explicit tape.
//!
//! `Tensor` is an immutable value: shape plus shared row-major storage.
//! Differentiable computation goes through a [`Tape`]; ops record just enough
//! to replay the chain rule in exact reverse execution order. Gradients are
//! owned by the tape and queried per tensor after [`Tape::backward`].
//!
//! Storage is f32; reductions (matmul inner products, sums, norms,
//! normalization statistics) accumulate in f64 so finite-difference checks
//! stay meaningful at f32 tolerances.

mod attention;
mod gradcheck;
mod ops_basic;
mod ops_conv;
mod ops_matmul;
mod ops_norm;
mod tape;

pub use ops_norm::BatchNormState;

pub use attention::multi_head_attention;
pub use gradcheck::{finite_difference_check, finite_difference_check_masked, resample_away_from_zero};
pub use tape::{Tape, TapeStatus};

use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::error::{fmt_shape, Error, Result};

/// Identifies the node a tensor was recorded as, on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub tape_id: u64,
    pub index: usize,
}

/// Dense N-dimensional f32 array, immutable after construction.
///
/// A tensor is either a constant (not attached to any tape) or recorded on
/// the tape that produced it, in which case it participates in backward and
/// its gradient can be read back with [`Tape::grad`].
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    pub(crate) node: Option<NodeRef>,
}

impl Tensor {
    /// Constant tensor (no gradient tracking).
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "from_vec",
                alloc::format!(
                    "shape {} has {numel} elements, data has {}",
                    fmt_shape(shape),
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn scalar_const(value: f32) -> Tensor {
        Tensor::from_vec(&[], alloc::vec![value]).unwrap()
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, alloc::vec![0.0; numel]).unwrap()
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, alloc::vec![value; numel]).unwrap()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f32>> {
        Arc::clone(&self.data)
    }

    /// Whether this tensor participates in gradient computation.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self) -> Result<f32> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "scalar",
                alloc::format!("expected 1 element, got shape {}", fmt_shape(&self.shape)),
            ));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn with_node(shape: Vec<usize>, data: Arc<Vec<f32>>, node: Option<NodeRef>) -> Tensor {
        Tensor { shape, data, node }
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = alloc::vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides
}

pub(crate) fn check_all_finite(op: &'static str, data: &[f32]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}
