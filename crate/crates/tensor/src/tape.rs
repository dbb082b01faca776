//! Reverse-mode gradient tape.
//!
//! Every operation on a [`Var`] appends a node holding its forward value and
//! a backward closure. [`Tape::backward`] walks the nodes in reverse creation
//! order, so the tape is always a valid topological order.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// Vector-Jacobian product of one recorded operation.
pub(crate) trait Backward<F: Real> {
    /// Returns one gradient per input; entries for inputs whose `needs` flag
    /// is false may be `None`.
    fn backward(&self, args: BackwardArgs<'_, F>) -> Vec<Option<Tensor<F>>>;
}

pub(crate) struct BackwardArgs<'a, F> {
    pub inputs: &'a [Rc<Tensor<F>>],
    pub output: &'a Tensor<F>,
    pub grad: &'a Tensor<F>,
    pub needs: &'a [bool],
}

struct Node<F: Real> {
    value: Rc<Tensor<F>>,
    requires_grad: bool,
    parents: Vec<usize>,
    op: Option<Box<dyn Backward<F>>>,
}

/// One forward pass worth of recorded operations.
///
/// A tape is single-threaded; independent samples can be processed on
/// independent tapes concurrently.
pub struct Tape<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<F>, requires_grad: bool) -> Var<'_, F> {
        self.push_node(Node {
            value: Rc::new(value),
            requires_grad,
            parents: Vec::new(),
            op: None,
        })
    }

    /// Leaf that receives a gradient (trainable parameter or probed input).
    pub fn param(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf(value, false)
    }

    fn push_node(&self, node: Node<F>) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push_op(
        &self,
        value: Tensor<F>,
        parents: &[usize],
        op: impl Backward<F> + 'static,
    ) -> Var<'_, F> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        self.push_node(Node {
            value: Rc::new(value),
            requires_grad,
            parents: parents.to_vec(),
            op: requires_grad.then(|| Box::new(op) as Box<dyn Backward<F>>),
        })
    }

    pub(crate) fn value(&self, id: usize) -> Rc<Tensor<F>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Back-propagates from a scalar. Gradients are returned fresh for every
    /// call; nothing accumulates on the tape between calls.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<Gradients<F>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(TensorError::Usage(
                "backward called with a variable from another tape".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward requires a scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; nodes.len()];
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Tensor::full(root.value.shape().to_vec(), F::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(grad) = grads[id].take() else { continue };
            let inputs: Vec<Rc<Tensor<F>>> = node
                .parents
                .iter()
                .map(|&p| Rc::clone(&nodes[p].value))
                .collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = op.backward(BackwardArgs {
                inputs: &inputs,
                output: &node.value,
                grad: &grad,
                needs: &needs,
            });
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, g), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(g), true) = (g, need) else { continue };
                debug_assert_eq!(g.shape(), nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[id] = Some(grad);
        }
        Ok(Gradients { grads })
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Real> {
    pub(crate) tape: &'t Tape<F>,
    pub(crate) id: usize,
}

impl<F: Real> fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t, F: Real> Var<'t, F> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<F>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub(crate) fn same_tape(&self, other: &Var<'t, F>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::Usage(
                "operands belong to different tapes".into(),
            ))
        }
    }
}

/// Gradients produced by one backward pass, indexed by variable.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, var: Var<'_, F>) -> Option<&Tensor<F>> {
        self.by_id(var.id)
    }

    pub fn by_id(&self, id: usize) -> Option<&Tensor<F>> {
        self.grads.get(id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_, F>) -> Option<Tensor<F>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}
