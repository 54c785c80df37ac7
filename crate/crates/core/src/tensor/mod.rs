//! Dense 4-D tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable (batch, channel, height, width) value buffer
//! plus an optional gradient buffer. Operations live in [`ops`] and record
//! their backward step on a [`GradientTape`] whenever any input requires a
//! gradient; [`backward`] replays the tape in reverse.
//!
//! Tensors are cheap to clone (shared storage). A tape, and every tensor
//! graph hanging off it, is confined to one logical thread; the kernels
//! themselves parallelize internally over disjoint output regions.

pub mod adam;
pub mod gradcheck;
pub(crate) mod kernels;
pub mod ops;
mod shape;

pub use adam::{adam_step, AdamState};
pub use shape::Shape;

use crate::error::{DceError, Result};
use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

/// Element type of a tensor: f32 for compute, f64 for verification oracles.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + std::iter::Sum
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    /// Checkpoint dtype code (0 = f32, 1 = f64).
    const DTYPE_CODE: u8;
    const BYTES: usize;

    fn cast(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE_CODE: u8 = 0;
    const BYTES: usize = 4;

    fn cast(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Scalar for f64 {
    const DTYPE_CODE: u8 = 1;
    const BYTES: usize = 8;

    fn cast(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

struct Inner<T: Scalar> {
    id: u64,
    shape: Shape,
    data: Vec<T>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
}

/// Immutable 4-D value buffer with an optional gradient.
///
/// Cloning is cheap and shares storage. The data is never mutated after
/// construction; only the gradient buffer is (during [`backward`]).
pub struct Tensor<T: Scalar = f32> {
    inner: Rc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Tensor<T> {
    fn build(shape: Shape, data: Vec<T>, requires_grad: bool) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(DceError::shape(
                "tensor",
                format!("data length {} != shape {} numel", data.len(), shape),
            ));
        }
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
            }),
        })
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        Self::build(shape, data, false)
    }

    /// A trainable leaf tensor.
    pub fn param(shape: Shape, data: Vec<T>) -> Result<Self> {
        Self::build(shape, data, true)
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        Self::build(shape, vec![value; shape.numel()], false).expect("consistent")
    }

    pub fn scalar_tensor(value: T) -> Self {
        Self::filled(Shape::scalar(), value)
    }

    /// Internal constructor for op outputs.
    pub(crate) fn output(shape: Shape, data: Vec<T>, requires_grad: bool) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        Self::build(shape, data, requires_grad).expect("consistent")
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> Shape {
        self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.numel()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Value of a 1x1x1x1 tensor.
    pub fn scalar(&self) -> Result<T> {
        if self.shape() != Shape::scalar() {
            return Err(DceError::shape(
                "scalar",
                format!("expected 1x1x1x1, got {}", self.shape()),
            ));
        }
        Ok(self.inner.data[0])
    }

    /// Same values, detached from any graph, not requiring gradients.
    pub fn detach(&self) -> Tensor<T> {
        Self::output(self.shape(), self.inner.data.clone(), false)
    }

    /// Convert every element (used by f64 verification oracles).
    pub fn cast_to<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data().iter().map(|&v| U::cast(v.as_f64())).collect();
        Tensor::<U>::output(self.shape(), data, false)
    }

    pub fn is_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    /// Run `f` on the gradient buffer, creating it zero-filled first.
    /// Backward kernels accumulate (`+=`) into the buffer.
    pub(crate) fn accum_grad_with(&self, f: impl FnOnce(&mut [T])) {
        let mut slot = self.inner.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![T::zero(); self.numel()]);
        f(buf);
    }

    /// Read the gradient without cloning; `f` sees `None` when absent.
    pub(crate) fn with_grad<R>(&self, f: impl FnOnce(Option<&[T]>) -> R) -> R {
        let slot = self.inner.grad.borrow();
        f(slot.as_deref())
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={}, requires_grad={})",
            self.id(),
            self.shape(),
            self.requires_grad()
        )
    }
}

type BackStep = Box<dyn FnOnce()>;

/// Ordered record of executed operations.
///
/// Ops push one closure per recorded operation; [`backward`] consumes the
/// tape and runs the closures in reverse order, accumulating gradients into
/// every reachable tensor that requires them. A tape that is `disabled`
/// records nothing, which is how inference runs without graph overhead.
pub struct GradientTape<T: Scalar = f32> {
    steps: RefCell<Vec<BackStep>>,
    active: bool,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> GradientTape<T> {
    pub fn new() -> Self {
        GradientTape {
            steps: RefCell::new(Vec::new()),
            active: true,
            _marker: std::marker::PhantomData,
        }
    }

    /// A tape that records nothing; ops become pure forward computations.
    pub fn disabled() -> Self {
        GradientTape {
            steps: RefCell::new(Vec::new()),
            active: false,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn len(&self) -> usize {
        self.steps.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// True when this op application must be recorded.
    pub(crate) fn wants(&self, inputs: &[&Tensor<T>]) -> bool {
        self.active && inputs.iter().any(|t| t.requires_grad())
    }

    pub(crate) fn push(&self, step: BackStep) {
        self.steps.borrow_mut().push(step);
    }
}

impl<T: Scalar> Default for GradientTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Populate gradients of every reachable `requires_grad` tensor with
/// d(loss)/d(tensor). Consumes the tape; a graph with no tensors requiring
/// gradients is a no-op.
pub fn backward<T: Scalar>(loss: &Tensor<T>, tape: GradientTape<T>) -> Result<()> {
    if loss.shape() != Shape::scalar() {
        return Err(DceError::invalid(
            "backward",
            format!("loss must be 1x1x1x1, got {}", loss.shape()),
        ));
    }
    if loss.requires_grad() {
        loss.accum_grad_with(|g| g[0] = T::one());
    }
    for step in tape.steps.into_inner().into_iter().rev() {
        step();
    }
    Ok(())
}
