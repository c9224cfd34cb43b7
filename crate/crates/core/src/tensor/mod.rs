//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tensor`] is a shared handle to a shape, a contiguous data buffer and an
//! optional gradient buffer. A [`Tape`] records primitive applications during
//! the forward pass; [`Tape::backward`] replays them in reverse, accumulating
//! adjoints into every tensor that requires a gradient. Gradients accumulate
//! additively across backward calls until explicitly zeroed.

pub mod check;
mod ops;

pub use check::{check_gradients, GradCheckReport, ParamCheck, DEFAULT_FD_EPS};

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::scalar::{cast, Scalar};

/// Forward-pass mode; dropout is the only op that distinguishes them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: domain error: {reason}")]
    Domain { op: &'static str, reason: String },
    #[error("{op}: index {index} out of bounds for size {bound}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("dropout rate must lie in [0, 1), got {rate}")]
    InvalidDropoutRate { rate: f64 },
    #[error("cosine similarity undefined for a zero-norm input")]
    ZeroNorm,
}

struct TensorInner<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Shared handle to a dense array with optional gradient buffer.
///
/// Cloning a `Tensor` clones the handle, not the storage; parameters stay
/// aliased between the model and the tape nodes that consume them.
pub struct Tensor<T> {
    inner: Rc<RefCell<TensorInner<T>>>,
}

impl<T> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .field("data", &inner.data)
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, checking that the shape matches the payload length.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        if numel_of(&shape) != data.len() {
            return Err(TensorError::InvalidShape {
                op: "new",
                shape,
                reason: format!("shape product != data length {}", data.len()),
            });
        }
        Ok(Self::from_parts(shape, data, false))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            inner: Rc::new(RefCell::new(TensorInner {
                shape,
                data,
                requires_grad,
                grad: None,
            })),
        }
    }

    /// Trainable leaf: `requires_grad` set.
    pub fn param(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let t = Self::new(shape, data)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel_of(&shape);
        Self::from_parts(shape, vec![T::zero(); n], false)
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![], vec![value], false)
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self::from_parts(vec![data.len()], data, false)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1 && self.inner.borrow().shape.len() <= 1
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, value: bool) {
        self.inner.borrow_mut().requires_grad = value;
    }

    /// Copies the data buffer out.
    pub fn value(&self) -> Vec<T> {
        self.inner.borrow().data.clone()
    }

    /// Scalar extraction; panics if the tensor is not single-element.
    pub fn item(&self) -> T {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() on non-scalar tensor");
        inner.data[0]
    }

    pub fn item_f64(&self) -> f64 {
        crate::scalar::to_f64(self.item())
    }

    /// Runs `f` over the data buffer without cloning it.
    pub fn with_data<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.inner.borrow().data)
    }

    /// Overwrites the data buffer in place; shapes must match.
    pub fn copy_from_slice(&self, src: &[T]) -> Result<(), TensorError> {
        let mut inner = self.inner.borrow_mut();
        if inner.data.len() != src.len() {
            return Err(TensorError::ShapeMismatch {
                op: "copy_from_slice",
                lhs: inner.shape.clone(),
                rhs: vec![src.len()],
            });
        }
        inner.data.copy_from_slice(src);
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.borrow().grad.clone()
    }

    pub fn has_grad(&self) -> bool {
        self.inner.borrow().grad.is_some()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Adds `delta` into the gradient buffer, allocating zeros on first use.
    pub(crate) fn accum_grad(&self, delta: &[T]) {
        let mut inner = self.inner.borrow_mut();
        debug_assert_eq!(inner.data.len(), delta.len());
        let grad = inner
            .grad
            .get_or_insert_with(|| vec![T::zero(); delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += *d;
        }
    }

    /// Scales the gradient buffer in place (used by gradient accumulation).
    pub fn scale_grad(&self, factor: T) {
        if let Some(grad) = self.inner.borrow_mut().grad.as_mut() {
            for g in grad.iter_mut() {
                *g *= factor;
            }
        }
    }

    pub(crate) fn grad_snapshot(&self) -> Option<Vec<T>> {
        self.inner.borrow().grad.clone()
    }

    /// Mutates parameter data through a closure (optimizer update path).
    pub fn update_data(&self, f: impl FnOnce(&mut [T], Option<&[T]>)) {
        let mut inner = self.inner.borrow_mut();
        let TensorInner { data, grad, .. } = &mut *inner;
        f(data, grad.as_deref());
    }

    /// Detached deep copy: fresh storage, same values, no grad.
    pub fn deep_clone(&self) -> Self {
        let inner = self.inner.borrow();
        let t = Self::from_parts(inner.shape.clone(), inner.data.clone(), false);
        t.set_requires_grad(inner.requires_grad);
        t
    }
}

type BackwardFn = Box<dyn Fn()>;

struct Node<T> {
    output: Tensor<T>,
    backward: BackwardFn,
}

/// Records primitive applications for reverse-mode differentiation.
///
/// A tape and the tensors recorded on it are confined to a single worker;
/// independent model replicas may each own their own tape in parallel.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// Recording tape for training passes.
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }
    }

    /// Non-recording tape for evaluation; ops run forward only.
    pub fn inference() -> Self {
        let t = Self::new();
        t.recording.set(false);
        t
    }

    pub fn is_recording(&self) -> bool {
        self.recording.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub(crate) fn wants_grad(&self, inputs: &[&Tensor<T>]) -> bool {
        self.recording.get() && inputs.iter().any(|t| t.requires_grad())
    }

    pub(crate) fn push(&self, output: Tensor<T>, backward: BackwardFn) {
        self.nodes.borrow_mut().push(Node { output, backward });
    }

    /// Propagates gradients from a scalar loss back to every recorded input.
    ///
    /// Seeds the loss gradient with 1 and visits nodes in reverse recording
    /// order, so each node's output adjoint is complete before its own rule
    /// runs. Repeated calls keep accumulating into existing grad buffers.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<(), TensorError> {
        if !loss.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: loss.shape(),
            });
        }
        loss.accum_grad(&[cast::<T>(1.0)]);
        let nodes = self.nodes.borrow();
        for node in nodes.iter().rev() {
            if node.output.has_grad() {
                (node.backward)();
            }
            // Interior adjoints are transient per pass; only leaves keep
            // accumulating until explicitly zeroed.
            node.output.zero_grad();
        }
        Ok(())
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Base offsets of every 1-d lane along `axis`, plus the lane stride/length.
pub(crate) fn lanes_of(shape: &[usize], axis: usize) -> (Vec<usize>, usize, usize) {
    let strides = strides_of(shape);
    let axis_len = shape[axis];
    let axis_stride = strides[axis];
    let mut bases = Vec::with_capacity(numel_of(shape) / axis_len.max(1));
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            bases.push(o * axis_stride * axis_len + i);
        }
    }
    (bases, axis_stride, axis_len)
}
