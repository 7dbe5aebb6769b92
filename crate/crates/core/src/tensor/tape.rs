use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Backward rule of one recorded op.
///
/// Called with the gradient of the op's output and a mask telling which
/// inputs are tracked; returns one entry per input (`None` where the mask is
/// false or the input receives no gradient).
pub type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    inputs: Vec<Option<usize>>,
    /// `None` for leaves.
    backward: Option<BackwardFn>,
}

/// Linear record of differentiable operations.
///
/// Node ids are assigned in creation order, so every node's inputs precede
/// it and walking the ids in reverse is a valid reverse topological order.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }
    }

    /// A tape that never records: leaves become constants and ops keep no
    /// backward state.
    pub fn no_grad() -> Self {
        let t = Tape::new();
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
        self.len() == 0
    }

    /// A value whose gradient is wanted.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let node = self.is_recording().then(|| {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                inputs: Vec::new(),
                backward: None,
            });
            nodes.len() - 1
        });
        Var {
            tape: self,
            value: Rc::new(value),
            node,
        }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        Var {
            tape: self,
            value: Rc::new(value),
            node: None,
        }
    }

    /// Records `value` as the output of an op over `inputs`.
    ///
    /// When no input is tracked (or the tape is not recording) the rule is
    /// dropped and the result is a constant.
    pub fn record<'t>(&'t self, value: Tensor, inputs: &[&Var<'t>], backward: BackwardFn) -> Var<'t> {
        let ids: Vec<Option<usize>> = inputs.iter().map(|v| v.node).collect();
        let node = (self.is_recording() && ids.iter().any(Option::is_some)).then(|| {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                inputs: ids,
                backward: Some(backward),
            });
            nodes.len() - 1
        });
        Var {
            tape: self,
            value: Rc::new(value),
            node,
        }
    }

    /// Reverse sweep from a scalar loss. Gradients are accumulated with `+=`
    /// so values consumed by several ops receive the sum of contributions.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients> {
        if !loss.value.shape().is_scalar() {
            return Err(Error::NonScalarLoss(loss.value.shape()));
        }
        let nodes = self.nodes.borrow();
        let mut leaf_grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root) = loss.node else {
            return Ok(Gradients { grads: leaf_grads });
        };
        let mut pending: Vec<Option<Tensor>> = (0..=root).map(|_| None).collect();
        pending[root] = Some(Tensor::scalar(1.0));

        for id in (0..=root).rev() {
            let Some(grad) = pending[id].take() else {
                continue;
            };
            let node = &nodes[id];
            let Some(rule) = &node.backward else {
                leaf_grads[id] = Some(grad);
                continue;
            };
            let mask: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = rule(&grad, &mask);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let (Some(input), Some(g)) = (*input, g) else {
                    continue;
                };
                match &mut pending[input] {
                    Some(acc) => {
                        debug_assert_eq!(acc.shape(), g.shape());
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf; `None` for constants and for leaves the loss does
    /// not depend on.
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        var.node.and_then(|id| self.grads.get(id)?.as_ref())
    }

    pub fn take(&mut self, var: &Var<'_>) -> Option<Tensor> {
        var.node.and_then(|id| self.grads.get_mut(id)?.take())
    }

    /// Gradient of a leaf, or zeros when it did not influence the loss.
    pub fn get_or_zeros(&self, var: &Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::from_parts(var.shape(), vec![0.0; var.shape().numel()]))
    }
}

/// A value on a tape: shared tensor plus its node id when tracked.
#[derive(Clone)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) value: Rc<Tensor>,
    pub(crate) node: Option<usize>,
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn detach(&self) -> Var<'t> {
        Var {
            tape: self.tape,
            value: Rc::clone(&self.value),
            node: None,
        }
    }

    /// Scalar value of a 1x1x1x1 var.
    pub fn item(&self) -> f64 {
        debug_assert!(self.shape().is_scalar());
        self.value.data()[0]
    }

    pub(crate) fn rc(&self) -> Rc<Tensor> {
        Rc::clone(&self.value)
    }
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("node", &self.node)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scale_rule(k: f64) -> BackwardFn {
        Box::new(move |g, _| vec![Some(g.map(|v| v * k))])
    }

    #[test]
    fn untracked_inputs_record_nothing() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let out = tape.record(Tensor::scalar(4.0), &[&c], scale_rule(2.0));
        assert!(!out.is_tracked());
        assert_eq!(tape.len(), 0);
    }

    #[test]
    fn no_grad_tape_keeps_no_nodes() {
        let tape = Tape::no_grad();
        let x = tape.leaf(Tensor::scalar(1.0));
        let y = tape.record(Tensor::scalar(3.0), &[&x], scale_rule(3.0));
        assert!(!y.is_tracked());
        assert!(tape.is_empty());
    }

    #[test]
    fn shared_leaf_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let a = tape.record(Tensor::scalar(2.0), &[&x], scale_rule(2.0));
        let b = tape.record(Tensor::scalar(3.0), &[&x], scale_rule(3.0));
        let sum = tape.record(
            Tensor::scalar(5.0),
            &[&a, &b],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        );
        let grads = tape.backward(&sum).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[5.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 2, 1, 1)).unwrap());
        assert!(matches!(tape.backward(&x), Err(Error::NonScalarLoss(_))));
    }
}
