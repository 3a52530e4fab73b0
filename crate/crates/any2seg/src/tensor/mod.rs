//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: a [`Tensor`] is an immutable dense
//! array, a [`Tape`] records the operations applied to watched tensors, and
//! [`Tape::backward`] replays the records in reverse append order to
//! populate gradients. Exactly the operations the fusion pipeline and the
//! distillation losses need are implemented — no convolutions, no GPU, no
//! graph rewriting.
//!
//! Tensors are plain values (`Arc` data plus a node id), so they are cheap
//! to clone and safe to share across threads. A `Tape` is single-threaded;
//! parallelism happens across samples, never inside one tape.

mod gradcheck;
mod ops;
mod tape;

pub use gradcheck::{grad_check, grad_check_detailed, GradCheckReport};
pub use ops::{COS_EPS, KL_EPS};
pub use tape::{Gradients, Tape};

use std::sync::atomic::AtomicU64;
use std::sync::Arc;

use crate::error::{Error, Result};

pub(crate) static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle tying a tensor to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub tape: u64,
    pub index: usize,
}

/// Immutable dense array of f64 values in row-major layout.
///
/// A scalar is a tensor of shape `[1]`. Tensors produced by tape operations
/// carry a node handle so gradients can be routed back to them.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    pub(crate) node: Option<NodeRef>,
}

impl Tensor {
    /// Builds a tensor, checking that `shape` and `data` agree.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            node: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![0.0; n]),
            requires_grad: false,
            node: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![value; n]),
            requires_grad: false,
            node: None,
        }
    }

    /// A scalar tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![value]),
            requires_grad: false,
            node: None,
        }
    }

    /// A rank-1 tensor from a slice.
    pub fn vector(values: &[f64]) -> Tensor {
        Tensor {
            shape: vec![values.len()],
            data: Arc::new(values.to_vec()),
            requires_grad: false,
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Extracts the value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::shape(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Same values, no tape node: gradients will not flow into this copy.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            requires_grad: false,
            node: None,
        }
    }

    /// True if any entry is NaN or infinite.
    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub(crate) fn with_node(
        shape: Vec<usize>,
        data: Vec<f64>,
        node: Option<NodeRef>,
        requires_grad: bool,
    ) -> Tensor {
        Tensor {
            shape,
            data: Arc::new(data),
            requires_grad,
            node,
        }
    }
}

/// Row-major strides of a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_element_count() {
        assert!(Tensor::from_vec(vec![2, 2], vec![1.0; 4]).is_ok());
        let err = Tensor::from_vec(vec![2, 2], vec![1.0; 3]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn scalar_is_shape_one() {
        let s = Tensor::scalar(3.5);
        assert_eq!(s.shape(), &[1]);
        assert!(s.is_scalar());
        assert_eq!(s.item().unwrap(), 3.5);
    }

    #[test]
    fn item_rejects_non_scalars() {
        let t = Tensor::vector(&[1.0, 2.0]);
        assert!(matches!(t.item(), Err(Error::Shape(_))));
    }

    #[test]
    fn detach_drops_grad_state() {
        let t = Tensor::vector(&[1.0, 2.0]);
        let d = t.detach();
        assert!(!d.requires_grad());
        assert!(d.node.is_none());
        assert_eq!(d.data(), t.data());
    }
}
