//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The engine is a Wengert tape: [`Tape`] owns an arena of value buffers,
//! every operation records the information its backward rule needs, and
//! [`Tape::backward`] replays the records in reverse. All arithmetic is
//! generic over [`Scalar`] so the same graph runs in f32 for training and in
//! f64 for finite-difference verification.

mod kernels;
mod tape;

pub use kernels::matmul_kernel;
pub use tape::{Activation, BnMode, BnState, Gradients, Tape, Var};

use crate::error::{Error, Result};
use std::fmt::Debug;

/// Element type of tensors: f32 for training, f64 for verification.
pub trait Scalar: num_traits::Float + Debug + Send + Sync + 'static {}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an f64 constant into the active scalar type.
#[inline]
pub fn sc<S: Scalar>(x: f64) -> S {
    S::from(x).expect("f64 representable in scalar type")
}

/// Widens a scalar to f64 (for logging and verification).
#[inline]
pub fn fd<S: Scalar>(x: S) -> f64 {
    x.to_f64().expect("scalar representable as f64")
}

/// Dense n-dimensional array, row-major, contiguous.
///
/// A `Tensor` is a plain value. Gradient tracking happens on a [`Tape`]:
/// registering a tensor as a leaf copies its data into the tape arena, and
/// after `backward` the accumulated gradient can be written back into `grad`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    pub requires_grad: bool,
    pub grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!("zero extent in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_f64_slice(shape: &[usize], data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&x| sc(x)).collect())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Replaces the stored gradient. The buffer must match the tensor shape.
    pub fn set_grad(&mut self, grad: Vec<S>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Contract(format!(
                "gradient has {} elements, tensor has {}",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn map<T: Scalar>(&self, f: impl Fn(S) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl<S: Scalar> Tensor<S> {
    /// Cast to another scalar type (used by the f64 verification mode).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        self.map(|x| sc(fd(x)))
    }
}
