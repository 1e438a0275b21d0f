//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain row-major value: shape, data, an optional gradient
//! buffer, and a `requires_grad` flag. All differentiable computation happens
//! on a [`Tape`], rebuilt for every forward pass: register tensors
//! as leaves, compose ops, call `backward` on a scalar, then read gradients
//! back per leaf. Tensors move freely between threads; a tape stays on one.

mod tape;

pub mod gradcheck;

pub use tape::{Tape, Var};

use thiserror::Error;

/// Zero-padded 3×3 convolution of one `[H,W,C]` image as plain values,
/// applied per channel. Shares the kernel machinery with the tape op.
pub fn blur3x3(data: &[f64], h: usize, w: usize, ch: usize, kernel: &[[f64; 3]; 3]) -> Vec<f64> {
    tape::mix3x3_forward(data, 1, h, w, ch, kernel)
}

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("shape {shape:?} implies {expected} elements, data has {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("backward requires a scalar loss, got shape {got:?}")]
    NonScalarLoss { got: Vec<usize> },
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },
}

/// Dense n-dimensional f64 value in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor from shape and row-major data. Fails unless
    /// `product(shape) == data.len()`.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected = numel(&shape);
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = numel(&shape);
        Self {
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a gradient-carrying parameter.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Gradient buffer, populated after a backward pass wrote it back.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Stores a gradient. Rejected for `requires_grad = false` tensors and
    /// for buffers of the wrong length.
    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<(), TensorError> {
        if !self.requires_grad {
            return Err(TensorError::Contract {
                op: "set_grad",
                msg: "tensor does not require grad".into(),
            });
        }
        if grad.len() != self.data.len() {
            return Err(TensorError::DataLength {
                shape: self.shape.clone(),
                expected: self.data.len(),
                got: grad.len(),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// True when every element is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm over all elements.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// In-place `self = a*self + b*other`, used by EMA and optimizer updates.
    /// Never touches gradients.
    pub fn axpby(&mut self, a: f64, b: f64, other: &Tensor) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "axpby",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (x, y) in self.data.iter_mut().zip(other.data.iter()) {
            *x = a * *x + b * *y;
        }
        Ok(())
    }
}
