//! Reverse-mode tape over [`Tensor`] values.
//!
//! A forward pass appends nodes to a [`Tape`]; `backward` walks the nodes in
//! reverse, accumulating parent gradients additively. One tape serves one
//! forward/backward pass: a second backward without a new forward is
//! rejected. Orchestration is single-threaded; the heavy kernels inside
//! individual ops parallelize over output elements.

use std::cell::RefCell;
use std::rc::Rc;

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Reverse pass of one recorded operation: given the gradient of the loss
/// with respect to this node's output, accumulate gradients into the parents
/// via the sink. Implementations capture the `NodeId`s and any saved values
/// they need at construction time.
pub trait BackwardOp<T: Real> {
    fn backward(&self, grad_out: &Tensor<T>, sink: &mut GradSink<T>);
}

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    op: Option<Box<dyn BackwardOp<T>>>,
    needs_grad: bool,
}

struct TapeInner<T: Real> {
    nodes: Vec<Node<T>>,
    spent: bool,
}

pub struct Tape<T: Real> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Real> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                spent: false,
            })),
        }
    }

    pub fn same_tape(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable leaf (an input we want gradients for).
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<T> {
        self.push(value, requires_grad, None)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        self.push(value, false, None)
    }

    pub fn constant_scalar(&self, v: T) -> Var<T> {
        self.constant(Tensor::scalar(v))
    }

    pub(crate) fn push(
        &self,
        value: Tensor<T>,
        needs_grad: bool,
        op: Option<Box<dyn BackwardOp<T>>>,
    ) -> Var<T> {
        let mut inner = self.inner.borrow_mut();
        assert!(!inner.spent, "tape already consumed by backward");
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            tape: self.clone(),
            id,
        }
    }

    pub(crate) fn value_of(&self, id: NodeId) -> Rc<Tensor<T>> {
        Rc::clone(&self.inner.borrow().nodes[id].value)
    }

    pub(crate) fn needs_grad_of(&self, id: NodeId) -> bool {
        self.inner.borrow().nodes[id].needs_grad
    }

    /// Reverse sweep from a scalar loss. Returns the gradients of every leaf
    /// that required them; intermediate gradients are freed as soon as their
    /// op has consumed them.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if !self.same_tape(&loss.tape) {
            return Err(Error::InvalidArg("loss from a different tape".into()));
        }
        let mut inner = self.inner.borrow_mut();
        if inner.spent {
            return Err(Error::InvalidArg(
                "backward called twice on one tape; rebuild the graph".into(),
            ));
        }
        inner.spent = true;
        if inner.nodes[loss.id].value.numel() != 1 {
            return Err(Error::ShapeMismatch("backward needs a scalar loss".into()));
        }

        let wants: Vec<bool> = inner.nodes.iter().map(|n| n.needs_grad).collect();
        let mut grads: Vec<Option<Tensor<T>>> = (0..inner.nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(inner.nodes[loss.id].value.shape(), T::one()));

        for id in (0..=loss.id).rev() {
            if !wants[id] {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let node = &inner.nodes[id];
            if let Some(op) = &node.op {
                let mut sink = GradSink {
                    grads: &mut grads,
                    wants: &wants,
                };
                op.backward(&g, &mut sink);
            } else {
                // leaf: keep its gradient for the caller
                grads[id] = Some(g);
            }
        }

        Ok(Gradients { by_node: grads })
    }
}

/// Accumulator the reverse sweep hands to each op.
pub struct GradSink<'a, T: Real> {
    grads: &'a mut Vec<Option<Tensor<T>>>,
    wants: &'a [bool],
}

impl<'a, T: Real> GradSink<'a, T> {
    /// Whether anyone upstream wants this node's gradient; ops skip work for
    /// parents that don't.
    pub fn wants(&self, id: NodeId) -> bool {
        self.wants[id]
    }

    /// Accumulate into the gradient buffer of `id` (allocated zeroed on first
    /// use) through a closure writing `+=` updates.
    pub fn add_to(&mut self, id: NodeId, shape: &[usize], f: impl FnOnce(&mut [T])) {
        if !self.wants[id] {
            return;
        }
        let slot = &mut self.grads[id];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(shape));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    /// Accumulate a fully formed contribution (moves it in when the slot is
    /// still empty).
    pub fn add_tensor(&mut self, id: NodeId, t: Tensor<T>) {
        if !self.wants[id] {
            return;
        }
        match &mut self.grads[id] {
            slot @ None => *slot = Some(t),
            Some(g) => g.add_assign(&t),
        }
    }
}

/// Result of a backward pass: gradients of the leaves.
pub struct Gradients<T: Real> {
    by_node: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        self.by_node.get(v.id).and_then(|g| g.as_ref())
    }

    pub(crate) fn by_id(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.by_node.get(id).and_then(|g| g.as_ref())
    }
}

/// Handle to one tape node.
pub struct Var<T: Real> {
    tape: Tape<T>,
    id: NodeId,
}

impl<T: Real> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var {
            tape: self.tape.clone(),
            id: self.id,
        }
    }
}

impl<T: Real> Var<T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.needs_grad_of(self.id)
    }

    pub fn item(&self) -> T {
        self.value().item()
    }

    /// A new constant leaf sharing this node's value: gradient flow stops
    /// here. Used for truncated backprop through time.
    pub fn detach(&self) -> Var<T> {
        let v = self.value().as_ref().clone();
        self.tape.constant(v)
    }
}

pub(crate) fn check_same_tape<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.tape.same_tape(&b.tape) {
        Ok(())
    } else {
        Err(Error::InvalidArg("vars belong to different tapes".into()))
    }
}
