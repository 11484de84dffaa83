//! Dense f64 tensors with recorded reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable row-major value; a [`Tape`] records every
//! primitive applied to tensors that require gradients and replays the record
//! in reverse to accumulate `d loss / d leaf` into each leaf. One tape lives
//! for one forward/backward pass. Distinct tapes share no mutable state.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, grad_check_multi};
pub use tape::Tape;

use std::cell::RefCell;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    Rank { shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, TensorError>;

struct Inner {
    shape: Vec<usize>,
    values: Rc<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
}

/// Immutable dense tensor. Cloning is cheap (shared storage); the gradient
/// buffer is filled in by [`Tape::backward`] and survives the tape.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Tensor> {
        Self::leaf(shape, values, false)
    }

    /// Leaf tensor that participates in gradient accumulation.
    pub fn param(shape: Vec<usize>, values: Vec<f64>) -> Result<Tensor> {
        Self::leaf(shape, values, true)
    }

    pub fn leaf(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        Self::from_shared(shape, Rc::new(values), requires_grad)
    }

    /// Build a leaf over an existing shared buffer without copying.
    pub fn from_shared(
        shape: Vec<usize>,
        values: Rc<Vec<f64>>,
        requires_grad: bool,
    ) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != values.len() {
            return Err(TensorError::Shape {
                op: "new",
                lhs: shape,
                rhs: vec![values.len()],
            });
        }
        Ok(Tensor {
            inner: Rc::new(Inner {
                shape,
                values,
                requires_grad,
                grad: RefCell::new(None),
            }),
        })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![], vec![v]).expect("scalar shape")
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n]).expect("zeros shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.inner.values
    }

    pub fn numel(&self) -> usize {
        self.inner.values.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Scalar extraction; panics if the tensor holds more than one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.values[0]
    }

    /// Gradient accumulated by the last backward pass, if any flowed here.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    /// Gradient, with leaves disconnected from the loss reading as zero.
    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.grad().unwrap_or_else(|| vec![0.0; self.numel()])
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    pub(crate) fn take_grad_for_backward(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    /// Same allocation identity, used by tests asserting bitwise reuse.
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner.values, &other.inner.values)
    }

    /// Same graph node — handles that share one gradient accumulator, which
    /// is stronger than sharing a value buffer.
    pub fn same_node(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("values", &self.inner.values)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}
