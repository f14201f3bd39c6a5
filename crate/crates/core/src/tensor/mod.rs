//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Every operation on a tensor that requires gradients records a node holding
//! its parents and a backward rule. Backward rules are themselves written with
//! tensor operations, so running [`grad`] with `create_graph = true` records the
//! backward pass as an ordinary graph that can be differentiated again. This is
//! what makes the mixed second-order products in [`grad_of_grad`] possible.
//!
//! Values are immutable once recorded and nodes are reference counted with
//! [`Arc`], so finished tensors can be shared read-only across threads. Whether
//! new operations are recorded is a per-thread switch (see [`no_grad`]).

mod autograd;
mod check;
mod conv;
mod ops;

use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::scalar::Scalar;

pub use autograd::{grad, grad_of_grad, vjp, Grads};
pub use check::{finite_diff_coords, finite_diff_grad, relative_error};
pub use conv::Conv2dSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} does not match data length {len}")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("gradients were computed without graph retention")]
    GraphNotRetained,
    #[error("function is not deterministic: {first} then {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Restores the previous recording mode on drop.
pub struct GradModeGuard {
    prev: bool,
}

impl GradModeGuard {
    pub fn new(enabled: bool) -> Self {
        let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
        Self { prev }
    }
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

/// Runs `f` without recording any operations on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _guard = GradModeGuard::new(false);
    f()
}

pub(crate) type BackwardFn<S> =
    dyn Fn(&Tensor<S>, &Tensor<S>, &[Tensor<S>], &[bool]) -> Vec<Option<Tensor<S>>> + Send + Sync;

pub(crate) struct GradFn<S: Scalar> {
    pub name: &'static str,
    pub parents: Vec<Tensor<S>>,
    pub backward: Box<BackwardFn<S>>,
}

struct Node<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
    requires_grad: bool,
    grad_fn: Option<GradFn<S>>,
}

/// An n-dimensional row-major array, optionally tracked for differentiation.
pub struct Tensor<S: Scalar>(Arc<Node<S>>);

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("Tensor");
        d.field("shape", &self.0.shape);
        if self.numel() <= 16 {
            d.field("data", &self.0.data);
        }
        d.field("requires_grad", &self.0.requires_grad);
        if let Some(g) = &self.0.grad_fn {
            d.field("op", &g.name);
        }
        d.finish()
    }
}

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    /// Builds a constant tensor, validating the shape and that all values are finite.
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(TensorError::ShapeData {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("constructor input".into()));
        }
        Ok(Self::from_parts(shape.to_vec(), Arc::new(data), false, None))
    }

    /// Constant tensor from data known to be consistent with `shape`.
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len(), "raw tensor shape {shape:?}");
        Self::from_parts(shape, Arc::new(data), false, None)
    }

    fn from_parts(
        shape: Vec<usize>,
        data: Arc<Vec<S>>,
        requires_grad: bool,
        grad_fn: Option<GradFn<S>>,
    ) -> Self {
        Tensor(Arc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            grad_fn,
        }))
    }

    /// Records an operation result. The backward rule is only kept when
    /// recording is enabled and some parent requires gradients.
    pub(crate) fn from_op<F>(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<S>,
        parents: Vec<Tensor<S>>,
        backward: F,
    ) -> Self
    where
        F: Fn(&Tensor<S>, &Tensor<S>, &[Tensor<S>], &[bool]) -> Vec<Option<Tensor<S>>>
            + Send
            + Sync
            + 'static,
    {
        Self::from_op_shared(name, shape, Arc::new(data), parents, backward)
    }

    pub(crate) fn from_op_shared<F>(
        name: &'static str,
        shape: Vec<usize>,
        data: Arc<Vec<S>>,
        parents: Vec<Tensor<S>>,
        backward: F,
    ) -> Self
    where
        F: Fn(&Tensor<S>, &Tensor<S>, &[Tensor<S>], &[bool]) -> Vec<Option<Tensor<S>>>
            + Send
            + Sync
            + 'static,
    {
        debug_assert_eq!(numel_of(&shape), data.len(), "{name} output shape {shape:?}");
        let track = is_grad_enabled() && parents.iter().any(Tensor::requires_grad);
        if track {
            let grad_fn = GradFn {
                name,
                parents,
                backward: Box::new(backward),
            };
            Self::from_parts(shape, data, true, Some(grad_fn))
        } else {
            Self::from_parts(shape, data, false, None)
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Self::raw(shape.to_vec(), vec![value; numel_of(shape)])
    }

    /// A rank-0 constant.
    pub fn scalar(value: S) -> Self {
        Self::raw(Vec::new(), vec![value])
    }

    pub fn from_slice(shape: &[usize], data: &[S]) -> Result<Self> {
        Self::new(shape, data.to_vec())
    }

    /// Convenience constructor for tests and literals.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| S::lit(x)).collect())
    }

    /// A leaf that requires gradients.
    pub fn param(shape: &[usize], data: Vec<S>) -> Result<Self> {
        Ok(Self::new(shape, data)?.requires_grad_(true))
    }

    /// Returns a leaf sharing this tensor's values with the given tracking flag.
    pub fn requires_grad_(&self, requires_grad: bool) -> Self {
        Self::from_parts(self.0.shape.clone(), Arc::clone(&self.0.data), requires_grad, None)
    }

    /// A constant leaf sharing this tensor's values.
    pub fn detach(&self) -> Self {
        self.requires_grad_(false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.0.data.to_vec()
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<S>> {
        Arc::clone(&self.0.data)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// Name of the operation that produced this tensor, if it was recorded.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.name)
    }

    pub(crate) fn grad_fn(&self) -> Option<&GradFn<S>> {
        self.0.grad_fn.as_ref()
    }

    pub fn same_node(&self, other: &Tensor<S>) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.data().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite(what.to_string()))
        }
    }

    /// Bitwise equality of shape and values.
    pub fn bit_eq(&self, other: &Tensor<S>) -> bool {
        self.shape() == other.shape()
            && self
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.to_f64().map(f64::to_bits) == b.to_f64().map(f64::to_bits))
    }

    pub fn max_abs_diff(&self, other: &Tensor<S>) -> S {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shapes");
        self.data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (*a - *b).abs())
            .fold(S::zero(), S::max)
    }

    /// Converts the element type; the result is a constant.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor::raw(
            self.shape().to_vec(),
            self.data().iter().map(|v| T::lit(v.as_f64())).collect(),
        )
    }
}
