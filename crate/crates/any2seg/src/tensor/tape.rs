//! Recording tape and the backward pass.

use std::cell::{Cell, RefCell};
use std::sync::atomic::Ordering;

use crate::error::{Error, Result};
use crate::tensor::{NodeRef, Tensor, NEXT_TAPE_ID};

/// Backward closure: given the gradient flowing into a node's output,
/// produce one gradient buffer per parent slot, in parent order.
pub(crate) type BackFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

pub(crate) struct Node {
    /// One entry per operation input. `None` marks a constant input that
    /// does not receive gradient.
    parents: Vec<Option<usize>>,
    back: BackFn,
}

/// Wengert list recording operations for one forward pass.
///
/// A tape is single-threaded and single-use: after [`Tape::backward`] it
/// must be [`Tape::reset`] (or dropped) before recording again.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    spent: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            spent: Cell::new(false),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Registers `t` as a differentiable leaf on this tape. The returned
    /// tensor shares the input's values and receives a gradient slot.
    pub fn watch(&self, t: &Tensor) -> Tensor {
        let index = self.push(Node {
            parents: Vec::new(),
            back: Box::new(|_| Vec::new()),
        });
        Tensor::with_node(
            t.shape().to_vec(),
            t.data().to_vec(),
            Some(NodeRef { tape: self.id, index }),
            true,
        )
    }

    /// Clears all recorded nodes so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.borrow_mut().clear();
        self.spent.set(false);
    }

    /// Runs reverse accumulation from a scalar `loss` recorded on this tape.
    ///
    /// Each node is visited exactly once, in reverse append order. Calling
    /// `backward` twice without an intervening [`Tape::reset`] is an error.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if !loss.is_scalar() {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let node = match loss.node {
            Some(n) if n.tape == self.id => n,
            Some(_) => {
                return Err(Error::state("loss was recorded on a different tape"));
            }
            None => {
                return Err(Error::state("loss is not recorded on the active tape"));
            }
        };
        if self.spent.get() {
            return Err(Error::state(
                "backward already ran on this tape; call reset() before reusing it",
            ));
        }
        self.spent.set(true);

        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[node.index] = Some(vec![1.0]);

        for i in (0..=node.index).rev() {
            let upstream = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let n = &nodes[i];
            if !n.parents.is_empty() {
                let parent_grads = (n.back)(&upstream);
                debug_assert_eq!(parent_grads.len(), n.parents.len());
                for (slot, grad) in n.parents.iter().zip(parent_grads) {
                    let p = match slot {
                        Some(p) => *p,
                        None => continue,
                    };
                    match &mut grads[p] {
                        Some(acc) => {
                            for (a, g) in acc.iter_mut().zip(&grad) {
                                *a += *g;
                            }
                        }
                        empty => *empty = Some(grad),
                    }
                }
            }
            grads[i] = Some(upstream);
        }

        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    pub(crate) fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Records an operation if any input lives on this tape; otherwise the
    /// result is a plain value and nothing is recorded. Inputs from another
    /// tape are a state error.
    pub(crate) fn emit(
        &self,
        inputs: &[&Tensor],
        shape: Vec<usize>,
        data: Vec<f64>,
        back: BackFn,
    ) -> Result<Tensor> {
        let mut parents = Vec::with_capacity(inputs.len());
        let mut any = false;
        for t in inputs {
            match t.node {
                Some(n) => {
                    if n.tape != self.id {
                        return Err(Error::state(
                            "input tensor belongs to a different tape",
                        ));
                    }
                    parents.push(Some(n.index));
                    any = true;
                }
                None => parents.push(None),
            }
        }
        if !any {
            return Ok(Tensor::with_node(shape, data, None, false));
        }
        let index = self.push(Node { parents, back });
        Ok(Tensor::with_node(
            shape,
            data,
            Some(NodeRef { tape: self.id, index }),
            true,
        ))
    }
}

/// Result of a backward pass: gradient buffers keyed by node index.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`.
    ///
    /// Returns `None` when `t` was never recorded on the tape that produced
    /// these gradients. A recorded tensor that the loss does not depend on
    /// gets an explicit zero gradient.
    pub fn wrt(&self, t: &Tensor) -> Option<Tensor> {
        let node = t.node?;
        if node.tape != self.tape {
            return None;
        }
        let data = match self.grads.get(node.index)? {
            Some(g) => g.clone(),
            None => vec![0.0; t.len()],
        };
        Some(Tensor::with_node(t.shape().to_vec(), data, None, false))
    }
}
