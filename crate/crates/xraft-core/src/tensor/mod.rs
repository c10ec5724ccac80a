//! Deterministic n-dimensional tensors with reverse-mode differentiation.
//!
//! Tensors form an implicit DAG: every differentiable operation stores
//! references to its inputs, and [`Tensor::backward`] replays the recorded
//! operations in reverse topological order. Construction and backward are
//! single-threaded; data buffers are immutable except through optimizer
//! steps and explicit in-place edits on leaves.

mod adam;
mod gradcheck;
mod kernels;
mod ops;
mod scalar;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use ops::{concat, corr_volume};
pub use scalar::Scalar;

use crate::error::{Error, Result};
use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// True while operations should be recorded for differentiation.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Runs `f` with gradient recording disabled (inference / teacher passes).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Guard(bool);
    impl Drop for Guard {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|c| c.set(self.0));
        }
    }
    let _guard = Guard(GRAD_ENABLED.with(|c| {
        let prev = c.get();
        c.set(false);
        prev
    }));
    f()
}

/// Operation record attached to a non-leaf tensor. Holds the parent
/// tensors plus whatever the backward rule needs beyond them.
pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add(Tensor<T>, Tensor<T>),
    Sub(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    AddScalar(Tensor<T>),
    MulScalar(Tensor<T>, T),
    Relu(Tensor<T>),
    Sigmoid(Tensor<T>),
    Tanh(Tensor<T>),
    /// Full reduction to a scalar.
    Sum(Tensor<T>),
    /// [N, ...] -> [N]: reduces everything but the leading axis.
    SumPerSample(Tensor<T>),
    Concat {
        inputs: Vec<Tensor<T>>,
        axis: usize,
    },
    Narrow {
        input: Tensor<T>,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(Tensor<T>),
    Permute {
        input: Tensor<T>,
        axes: Vec<usize>,
    },
    Conv2d {
        input: Tensor<T>,
        weight: Tensor<T>,
        bias: Tensor<T>,
        stride: usize,
        padding: usize,
    },
    BilinearSample {
        input: Tensor<T>,
        coords: Tensor<T>,
    },
    CorrVolume {
        f1: Tensor<T>,
        f2: Tensor<T>,
    },
    AvgPool2(Tensor<T>),
    UpsampleBilinear {
        input: Tensor<T>,
        factor: usize,
    },
    InstanceNorm {
        input: Tensor<T>,
        gamma: Tensor<T>,
        beta: Tensor<T>,
        /// (mean, inverse std) per (n, c) group, saved at forward time.
        mean: Vec<T>,
        istd: Vec<T>,
    },
    /// L2 norm over axis 1: [N,C,H,W] -> [N,1,H,W]. Subgradient 0 at 0.
    VecNorm(Tensor<T>),
}

impl<T: Scalar> Op<T> {
    fn parents(&self) -> Vec<&Tensor<T>> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::AddScalar(a) | Op::MulScalar(a, _) => vec![a],
            Op::Relu(a) | Op::Sigmoid(a) | Op::Tanh(a) => vec![a],
            Op::Sum(a) | Op::SumPerSample(a) | Op::Reshape(a) => vec![a],
            Op::Concat { inputs, .. } => inputs.iter().collect(),
            Op::Narrow { input, .. } => vec![input],
            Op::Permute { input, .. } => vec![input],
            Op::Conv2d {
                input, weight, bias, ..
            } => vec![input, weight, bias],
            Op::BilinearSample { input, coords } => vec![input, coords],
            Op::CorrVolume { f1, f2 } => vec![f1, f2],
            Op::AvgPool2(a) => vec![a],
            Op::UpsampleBilinear { input, .. } => vec![input],
            Op::InstanceNorm {
                input, gamma, beta, ..
            } => vec![input, gamma, beta],
            Op::VecNorm(a) => vec![a],
        }
    }
}

pub(crate) struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Rc<RefCell<Vec<T>>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<T>>>,
    op: Op<T>,
}

/// Cheaply clonable handle to a tensor node.
pub struct Tensor<T: Scalar> {
    inner: Rc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    fn from_parts(shape: Vec<usize>, data: Rc<RefCell<Vec<T>>>, requires_grad: bool, op: Op<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.borrow().len());
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data,
                requires_grad: Cell::new(requires_grad),
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Self {
        let record = grad_enabled() && op.parents().iter().any(|p| p.requires_grad());
        let op = if record { op } else { Op::Leaf };
        Tensor::from_parts(shape, Rc::new(RefCell::new(data)), record, op)
    }

    /// New constant leaf (no gradient).
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "tensor of shape {:?} needs {} values, got {}",
                shape,
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Tensor::from_parts(
            shape.to_vec(),
            Rc::new(RefCell::new(data)),
            false,
            Op::Leaf,
        ))
    }

    /// New trainable leaf.
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let t = Tensor::new(shape, data)?;
        t.inner.requires_grad.set(true);
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(
            shape.to_vec(),
            Rc::new(RefCell::new(vec![T::zero(); n])),
            false,
            Op::Leaf,
        )
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(
            shape.to_vec(),
            Rc::new(RefCell::new(vec![value; n])),
            false,
            Op::Leaf,
        )
    }

    pub fn scalar(value: T) -> Self {
        Tensor::full(&[1], value)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Flips trainability of a leaf. Used by freeze policies.
    pub fn set_requires_grad(&self, value: bool) {
        self.inner.requires_grad.set(value);
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    /// Mutable access to the raw buffer (optimizer steps, perturbations).
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::Shape(format!(
                "item() needs a scalar tensor, shape is {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data.borrow()[0])
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn has_grad(&self) -> bool {
        self.inner.grad.borrow().is_some()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Leaf tensor sharing this buffer, cut off from the graph.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::from_parts(
            self.inner.shape.clone(),
            Rc::clone(&self.inner.data),
            false,
            Op::Leaf,
        )
    }

    /// Deep copy of the values into a fresh constant leaf.
    pub fn copy_values(&self) -> Tensor<T> {
        Tensor::from_parts(
            self.inner.shape.clone(),
            Rc::new(RefCell::new(self.to_vec())),
            false,
            Op::Leaf,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    pub fn assert_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Diverged(format!("{what} contains NaN or Inf")))
        }
    }

    /// Adds `contrib` into the persistent gradient accumulator, allocating
    /// it on first use. Repeated backward passes without
    /// [`Tensor::zero_grad`] keep accumulating, matching the multivariate
    /// chain rule.
    pub fn accumulate_grad(&self, contrib: &[T]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi = *gi + *ci;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    pub(crate) fn op(&self) -> &Op<T> {
        &self.inner.op
    }

    /// Backpropagates from a scalar loss, populating `grad` on every
    /// tensor in the recorded graph that requires gradients.
    ///
    /// Each call propagates a fresh unit seed through per-call scratch
    /// buffers and then adds the result into the persistent accumulators,
    /// so calling backward twice adds the same gradient twice.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward() needs a scalar loss, shape is {:?}",
                self.shape()
            )));
        }
        Graph::trace(self).replay_backward(self)
    }
}

/// Per-call scratch gradients, keyed by node. Kept separate from the
/// persistent accumulators so stale values can never feed back into the
/// propagation.
pub(crate) struct GradTable<T: Scalar> {
    pos: std::collections::HashMap<u64, usize>,
    bufs: Vec<Option<Vec<T>>>,
    sizes: Vec<usize>,
}

impl<T: Scalar> GradTable<T> {
    fn new(order: &[Tensor<T>]) -> Self {
        let mut pos = std::collections::HashMap::with_capacity(order.len());
        let mut sizes = Vec::with_capacity(order.len());
        for (i, t) in order.iter().enumerate() {
            pos.insert(t.id(), i);
            sizes.push(t.numel());
        }
        GradTable {
            pos,
            bufs: (0..order.len()).map(|_| None).collect(),
            sizes,
        }
    }

    fn slot(&self, t: &Tensor<T>) -> usize {
        *self.pos.get(&t.id()).expect("tensor missing from grad table")
    }

    /// Removes and returns this node's scratch gradient, if any arrived.
    pub(crate) fn take(&mut self, t: &Tensor<T>) -> Option<Vec<T>> {
        let i = self.slot(t);
        self.bufs[i].take()
    }

    /// Takes the buffer out for in-place mutation, allocating zeros on
    /// first touch. Must be paired with [`GradTable::put`].
    pub(crate) fn take_or_zeros(&mut self, t: &Tensor<T>) -> Vec<T> {
        let i = self.slot(t);
        self.bufs[i].take().unwrap_or_else(|| vec![T::zero(); self.sizes[i]])
    }

    pub(crate) fn put(&mut self, t: &Tensor<T>, buf: Vec<T>) {
        let i = self.slot(t);
        debug_assert!(self.bufs[i].is_none());
        self.bufs[i] = Some(buf);
    }

    /// Runs `f` over the (zero-initialized on demand) scratch buffer.
    pub(crate) fn with_buf(&mut self, t: &Tensor<T>, f: impl FnOnce(&mut [T])) {
        let mut buf = self.take_or_zeros(t);
        f(&mut buf);
        self.put(t, buf);
    }

    /// Accumulates `contrib` into the scratch buffer.
    pub(crate) fn add(&mut self, t: &Tensor<T>, contrib: &[T]) {
        self.with_buf(t, |buf| {
            for (b, c) in buf.iter_mut().zip(contrib) {
                *b = *b + *c;
            }
        });
    }
}

/// Topologically ordered record of the operations reachable from a root.
///
/// Dropping the graph (and the root) releases every intermediate buffer.
pub struct Graph<T: Scalar> {
    /// Nodes in topological order, leaves first.
    order: Vec<Tensor<T>>,
}

impl<T: Scalar> Graph<T> {
    /// Collects the subgraph below `root` by iterative post-order DFS.
    /// Node ids give a stable order, so the trace is deterministic.
    pub fn trace(root: &Tensor<T>) -> Self {
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        // Stack of (node, next child index to expand).
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(root.clone(), 0)];
        visited.insert(root.id());
        while let Some((node, child_idx)) = stack.pop() {
            let parents = node.op().parents();
            if child_idx < parents.len() {
                let child = parents[child_idx].clone();
                stack.push((node, child_idx + 1));
                if !visited.contains(&child.id()) {
                    visited.insert(child.id());
                    stack.push((child, 0));
                }
            } else {
                order.push(node);
            }
        }
        Graph { order }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Clears the gradient accumulator on every node in the graph,
    /// including intermediates, so a replay starts from a clean slate.
    pub fn zero_grads(&self) {
        for node in &self.order {
            node.zero_grad();
        }
    }

    /// Visits every recorded operation exactly once, in reverse
    /// topological order, applying its gradient rule. Scratch gradients
    /// are folded into the persistent accumulators as each node is
    /// retired.
    fn replay_backward(&self, root: &Tensor<T>) -> Result<()> {
        let mut table = GradTable::new(&self.order);
        table.put(root, vec![T::one()]);
        for node in self.order.iter().rev() {
            let g = match table.take(node) {
                Some(g) => g,
                None => continue,
            };
            if node.requires_grad() {
                node.accumulate_grad(&g);
            }
            ops::backward_step(node, &g, &mut table)?;
        }
        Ok(())
    }
}
