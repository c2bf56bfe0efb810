//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Tensors are reference-counted handles onto flat row-major storage. Each
//! differentiable operation records a graph node holding its parents and a
//! backward closure; [`backward`] walks the graph once in reverse topological
//! order, accumulating gradients into every `requires_grad` leaf it can
//! reach. The graph is consumed by the walk, so a training step rebuilds it
//! on the next forward pass.
//!
//! Storage is generic over [`Scalar`]: `f32` for training, `f64` for the
//! gradient-check suites.

mod dispatch;
mod gradcheck;
pub(crate) mod kernels;
mod ops;

pub use dispatch::{forward_op, AttrValue, Attrs};
pub use gradcheck::{check_gradients, check_gradients_params, GradCheckReport};

use std::cell::{Ref, RefCell, RefMut};
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: String, detail: String },
    #[error("unknown op kind '{0}'")]
    UnknownKind(String),
    #[error("{op}: invalid attribute: {detail}")]
    InvalidAttr { op: String, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss tensor is not attached to a computation graph")]
    DetachedGraph,
    #[error("numeric domain error: {0}")]
    NumericDomain(String),
    #[error("{op}: index {index} out of range for dimension of size {size}")]
    IndexOutOfRange { op: String, index: usize, size: usize },
}

pub(crate) fn shape_err(op: &str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op: op.to_string(),
        detail: detail.into(),
    }
}

/// Dtype-generic scalar for tensor storage. Implemented for `f32` and `f64`.
pub trait Scalar:
    Copy
    + Clone
    + PartialEq
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Default
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $bytes:literal) => {
        impl Scalar for $t {
            const DTYPE: &'static str = $name;
            const BYTES: usize = $bytes;

            fn zero() -> Self {
                0.0
            }
            fn one() -> Self {
                1.0
            }
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn maximum(self, other: Self) -> Self {
                self.max(other)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $bytes];
                buf.copy_from_slice(bytes);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_scalar!(f32, "f32", 4);
impl_scalar!(f64, "f64", 8);

static NEXT_TENSOR_ID: AtomicUsize = AtomicUsize::new(0);

type BackwardFn<F> = Box<dyn FnOnce(&[F])>;

pub(crate) struct Node<F: Scalar> {
    parents: Vec<Tensor<F>>,
    backward: BackwardFn<F>,
}

struct Inner<F: Scalar> {
    id: usize,
    shape: Vec<usize>,
    values: RefCell<Vec<F>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<F>>>,
    node: RefCell<Option<Node<F>>>,
}

/// Dense tensor participating in a reverse-mode differentiation graph.
///
/// Cloning is shallow: clones share storage, gradient, and graph node. Use
/// [`Tensor::detach`] for an independent copy outside the graph.
pub struct Tensor<F: Scalar> {
    inner: Rc<Inner<F>>,
}

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Self {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<F: Scalar> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl<F: Scalar> Tensor<F> {
    fn construct(
        shape: Vec<usize>,
        values: Vec<F>,
        requires_grad: bool,
        node: Option<Node<F>>,
    ) -> Self {
        debug_assert_eq!(kernels::numel(&shape), values.len());
        Self {
            inner: Rc::new(Inner {
                id: NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                values: RefCell::new(values),
                requires_grad,
                grad: RefCell::new(None),
                node: RefCell::new(node),
            }),
        }
    }

    pub fn from_vec(shape: Vec<usize>, values: Vec<F>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(shape_err("from_vec", format!("zero dimension in {shape:?}")));
        }
        if kernels::numel(&shape) != values.len() {
            return Err(shape_err(
                "from_vec",
                format!("shape {:?} implies {} values, got {}", shape, kernels::numel(&shape), values.len()),
            ));
        }
        Ok(Self::construct(shape, values, false, None))
    }

    /// Trainable leaf: `requires_grad` set, gradients accumulate here.
    pub fn param(shape: Vec<usize>, values: Vec<F>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(shape_err("param", format!("zero dimension in {shape:?}")));
        }
        if kernels::numel(&shape) != values.len() {
            return Err(shape_err(
                "param",
                format!("shape {:?} implies {} values, got {}", shape, kernels::numel(&shape), values.len()),
            ));
        }
        Ok(Self::construct(shape, values, true, None))
    }

    pub fn scalar(v: F) -> Self {
        Self::construct(vec![1], vec![v], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::construct(shape.to_vec(), vec![F::zero(); kernels::numel(shape)], false, None)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::construct(shape.to_vec(), vec![F::one(); kernels::numel(shape)], false, None)
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        Self::construct(shape.to_vec(), vec![v; kernels::numel(shape)], false, None)
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        values: Vec<F>,
        parents: Vec<Tensor<F>>,
        backward: impl FnOnce(&[F]) + 'static,
    ) -> Self {
        let tracked = parents.iter().any(Tensor::needs_grad);
        let node = tracked.then(|| Node {
            parents,
            backward: Box::new(backward),
        });
        Self::construct(shape, values, false, node)
    }

    pub fn id(&self) -> usize {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        kernels::numel(&self.inner.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// True when this tensor is a trainable leaf or sits on a graph path to
    /// one, i.e. backward must deliver a gradient here.
    pub fn needs_grad(&self) -> bool {
        self.inner.requires_grad || self.inner.node.borrow().is_some()
    }

    pub fn values(&self) -> Ref<'_, Vec<F>> {
        self.inner.values.borrow()
    }

    /// Mutable access to raw storage (optimizer updates, gradient-check
    /// perturbations). Must not be held across op calls.
    pub fn values_mut(&self) -> RefMut<'_, Vec<F>> {
        self.inner.values.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<F> {
        self.inner.values.borrow().clone()
    }

    /// Sole element of a single-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.values.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<F>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, contrib: &[F]) {
        debug_assert_eq!(contrib.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, &ci) in g.iter_mut().zip(contrib) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    /// Copy of the values as a fresh constant tensor outside any graph.
    pub fn detach(&self) -> Tensor<F> {
        Self::construct(self.inner.shape.clone(), self.to_vec(), false, None)
    }

    /// Deep copy preserving `requires_grad` (fresh id, no graph, no grad).
    pub fn deep_clone(&self) -> Tensor<F> {
        Self::construct(self.inner.shape.clone(), self.to_vec(), self.inner.requires_grad, None)
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.borrow().is_none()
    }
}

/// Gradient map returned by [`backward`]: leaf tensor id -> gradient values.
/// Plain data, immutable once returned, safe to transfer between threads.
#[derive(Debug, Clone, Default)]
pub struct GradMap<F: Scalar>(BTreeMap<usize, Vec<F>>);

impl<F: Scalar> GradMap<F> {
    pub fn get(&self, t: &Tensor<F>) -> Option<&Vec<F>> {
        self.0.get(&t.id())
    }

    pub fn get_by_id(&self, id: usize) -> Option<&Vec<F>> {
        self.0.get(&id)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&usize, &Vec<F>)> {
        self.0.iter()
    }
}

/// Run reverse-mode differentiation from a scalar loss.
///
/// Populates `grad` on every reachable `requires_grad` leaf (accumulating
/// additively across multiple uses) and returns the same gradients keyed by
/// tensor id. The traversal consumes the graph: intermediate nodes are freed
/// as they are processed, so a second backward on the same loss reports a
/// detached graph.
pub fn backward<F: Scalar>(loss: &Tensor<F>) -> Result<GradMap<F>, TensorError> {
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
    }
    if loss.inner.node.borrow().is_none() {
        if loss.requires_grad() {
            // Degenerate but well-defined: the loss is itself a leaf.
            loss.accumulate_grad(&[F::one()]);
            let mut map = BTreeMap::new();
            map.insert(loss.id(), vec![F::one()]);
            return Ok(GradMap(map));
        }
        return Err(TensorError::DetachedGraph);
    }

    // Iterative post-order DFS: `order` ends up parents-before-children,
    // so the reverse walk below sees each consumer before its inputs.
    let mut order: Vec<Tensor<F>> = Vec::new();
    let mut visited: HashSet<usize> = HashSet::new();
    let mut stack: Vec<(Tensor<F>, bool)> = vec![(loss.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(node) = t.inner.node.borrow().as_ref() {
            for p in &node.parents {
                if !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }

    loss.accumulate_grad(&[F::one()]);

    let mut map = BTreeMap::new();
    for t in order.iter().rev() {
        let node = t.inner.node.borrow_mut().take();
        if let Some(node) = node {
            let grad = t.inner.grad.borrow().clone();
            if let Some(grad) = grad {
                (node.backward)(&grad);
            }
            if !t.requires_grad() {
                // Intermediate: gradient fully consumed, free it.
                *t.inner.grad.borrow_mut() = None;
            }
        }
        if t.requires_grad() {
            if let Some(g) = t.inner.grad.borrow().as_ref() {
                map.insert(t.id(), g.clone());
            }
        }
    }
    Ok(GradMap(map))
}
