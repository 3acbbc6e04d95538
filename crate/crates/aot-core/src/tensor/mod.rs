//! Dense row-major tensors with optional tape-based reverse-mode
//! differentiation.
//!
//! A [`Tensor`] is an immutable value: shape and contents never change after
//! construction. While a [`tape::Tape`] is recording on the current thread,
//! every operation whose inputs are tracked appends a node to it, and
//! [`tape::Tape::backward`] later replays the nodes in exact reverse creation
//! order. Tensors built while no tape is active carry no node and cost
//! nothing extra.

pub mod conv;
pub mod fdiff;
pub(crate) mod kernels;
pub mod ops;
pub mod serial;
pub mod tape;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use tape::NodeRef;

#[derive(Clone, Debug)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    node: Option<NodeRef>,
}

impl<T: Scalar> PartialEq for Tensor<T> {
    /// Structural equality on shape and contents; tape bookkeeping is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    /// Build a tensor, rejecting NaN and infinities.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Tensor<T>> {
        if numel_of(shape) != data.len() {
            return Err(Error::Shape(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        for &v in &data {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "tensor constructed with non-finite value {v:?}"
                )));
            }
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            node: None,
        })
    }

    /// Build a logit-bias tensor that may contain -inf entries for masked
    /// positions. NaN and +inf are still rejected.
    pub fn from_vec_allowing_neg_inf(shape: &[usize], data: Vec<T>) -> Result<Tensor<T>> {
        if numel_of(shape) != data.len() {
            return Err(Error::Shape(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        for &v in &data {
            if v.is_nan() || v == T::infinity() {
                return Err(Error::Numeric(format!(
                    "bias tensor constructed with invalid value {v:?}"
                )));
            }
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor<T> {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::ZERO; numel_of(shape)],
            node: None,
        }
    }

    pub fn full(shape: &[usize], value: T) -> Tensor<T> {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel_of(shape)],
            node: None,
        }
    }

    /// Rank-0 scalar tensor.
    pub fn scalar(value: T) -> Tensor<T> {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            node: None,
        }
    }

    pub(crate) fn with_node(shape: Vec<usize>, data: Vec<T>, node: Option<NodeRef>) -> Tensor<T> {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor { shape, data, node }
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Ruled by convention: a scalar is rank 0 or any single-element shape.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Result<T> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Shape(format!(
                "expected scalar tensor, got shape {:?}",
                self.shape
            )))
        }
    }

    /// Number of rows when viewed as a 2-D matrix (product of all extents but
    /// the last).
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    /// Last extent, or 1 for rank 0.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Element accessor for 2-D tensors in tests and small-scale code.
    pub fn at2(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    /// Copy of this tensor with no tape attachment: gradients will not flow
    /// back through it.
    pub fn detach(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn node(&self) -> Option<NodeRef> {
        self.node
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.to_f64()).collect(),
            node: None,
        }
    }

    pub fn cast_from(other: &Tensor<f64>) -> Tensor<T> {
        Tensor {
            shape: other.shape.clone(),
            data: other.data.iter().map(|&v| T::from_f64(v)).collect(),
            node: None,
        }
    }

    /// Largest absolute difference to another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Random tensor helpers used by parameter initialization and tests.
impl<T: Scalar> Tensor<T> {
    pub fn randn(shape: &[usize], std: f64, rng: &mut crate::rng::Rng) -> Tensor<T> {
        let data = (0..numel_of(shape))
            .map(|_| T::from_f64(rng.normal() * std))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            node: None,
        }
    }

    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut crate::rng::Rng) -> Tensor<T> {
        let data = (0..numel_of(shape))
            .map(|_| T::from_f64(rng.uniform(lo, hi)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            node: None,
        }
    }
}
