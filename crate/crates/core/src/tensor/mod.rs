//! Dense tensors with tape-free reverse-mode autodiff.
//!
//! Every tensor produced by an operation keeps a backpointer to the operation
//! and its inputs. [`Tensor::backward`] orders the reachable nodes
//! topologically and runs each vector-Jacobian product once, accumulating
//! gradients additively into every node that requires them.
//!
//! Tensors are immutable once built. Trainable state lives outside the graph
//! (see [`ParamStore`]) and is copied into fresh leaves for each
//! forward pass.

mod ops;
pub mod optim;
mod params;

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{Error, Result};

pub(crate) use ops::Op;
pub use ops::{log_sigmoid, sigmoid, softplus};
pub use params::{Binder, Gradients, Param, ParamStore};

/// Build-wide float precision.
#[cfg(not(feature = "f32"))]
pub type Float = f64;
#[cfg(feature = "f32")]
pub type Float = f32;

pub const DTYPE_NAME: &str = if cfg!(feature = "f32") { "f32" } else { "f64" };

static DEBUG_CHECKS: AtomicBool = AtomicBool::new(false);

/// When on, every operation rejects NaN/Inf in its forward output.
pub fn set_debug_checks(on: bool) {
    DEBUG_CHECKS.store(on, Ordering::Relaxed);
}

pub fn debug_checks() -> bool {
    DEBUG_CHECKS.load(Ordering::Relaxed)
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

pub(crate) struct Node {
    shape: Vec<usize>,
    data: Vec<Float>,
    grad: RefCell<Option<Vec<Float>>>,
    requires_grad: bool,
    op: Option<Op>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.op.as_ref().map(Op::name))
            .finish()
    }
}

fn check_shape(data_len: usize, shape: &[usize]) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "dimensions must be positive".into(),
        });
    }
    let n: usize = shape.iter().product();
    if n != data_len {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("holds {n} elements but data has {data_len}"),
        });
    }
    Ok(())
}

impl Tensor {
    fn build(data: Vec<Float>, shape: Vec<usize>, requires_grad: bool, op: Option<Op>) -> Self {
        Tensor(Rc::new(Node {
            shape,
            data,
            grad: RefCell::new(None),
            requires_grad,
            op,
        }))
    }

    /// A constant: never receives gradient.
    pub fn new(data: Vec<Float>, shape: &[usize]) -> Result<Self> {
        check_shape(data.len(), shape)?;
        Ok(Self::build(data, shape.to_vec(), false, None))
    }

    /// A trainable leaf.
    pub fn leaf(data: Vec<Float>, shape: &[usize]) -> Result<Self> {
        check_shape(data.len(), shape)?;
        Ok(Self::build(data, shape.to_vec(), true, None))
    }

    pub fn scalar(x: Float) -> Self {
        Self::build(vec![x], vec![1], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(vec![0.0; shape.iter().product()], shape)
    }

    pub(crate) fn from_op(data: Vec<Float>, shape: Vec<usize>, op: Op) -> Result<Self> {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        if debug_checks() && data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        let op = requires_grad.then_some(op);
        Ok(Self::build(data, shape, requires_grad, op))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[Float] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<Float> {
        self.0.data.clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Float {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub fn grad(&self) -> Option<Ref<'_, Vec<Float>>> {
        let g = self.0.grad.borrow();
        if g.is_some() {
            Some(Ref::map(g, |g| g.as_ref().expect("checked")))
        } else {
            None
        }
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::build(self.0.data.clone(), self.0.shape.clone(), false, None)
    }

    pub(crate) fn ptr(&self) -> *const Node {
        Rc::as_ptr(&self.0)
    }

    fn accumulate(&self, g: &[Float]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Backpropagates from this scalar, accumulating `∂self/∂x` into the grad
    /// slot of every reachable tensor that requires gradient.
    pub fn backward(&self) -> Result<()> {
        Graph::build(self)?.backward();
        Ok(())
    }
}

/// Topologically ordered view of the nodes a scalar loss depends on.
pub struct Graph {
    order: Vec<Tensor>,
}

impl Graph {
    pub fn build(loss: &Tensor) -> Result<Self> {
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        if !loss.requires_grad() {
            return Ok(Self { order });
        }
        // Iterative post-order DFS; deep transformer graphs overflow recursion.
        let mut stack: Vec<(Tensor, bool)> = vec![(loss.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.ptr()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = &t.0.op {
                for p in op.parents() {
                    if p.requires_grad() && !seen.contains(&p.ptr()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        Ok(Self { order })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Nodes in topological order (inputs before the loss).
    pub fn nodes(&self) -> &[Tensor] {
        &self.order
    }

    fn backward(&self) {
        let Some(loss) = self.order.last() else {
            return;
        };
        // Interior grads are per-pass; only leaves accumulate across passes.
        for t in &self.order {
            if !t.is_leaf() {
                t.zero_grad();
            }
        }
        loss.accumulate(&[1.0]);
        for t in self.order.iter().rev() {
            let Some(op) = &t.0.op else { continue };
            let g = match t.0.grad.borrow().as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            let parents = op.parents();
            for (p, pg) in parents.iter().zip(op.backward(&t.0, &g)) {
                if let Some(pg) = pg {
                    if p.requires_grad() {
                        p.accumulate(&pg);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests;
