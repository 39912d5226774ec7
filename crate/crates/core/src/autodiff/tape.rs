use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use super::{AutodiffError, Tensor};

/// Local backward rule: maps the output gradient to one optional gradient per
/// operand. The flag slice says which operands actually need a gradient.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Define-by-run operation record.
///
/// Every operand of node `k` was created before `k`, so a single reverse sweep
/// visits the graph in topological order. A tape is single-owner; build a
/// fresh one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grad-tracked leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Arc::new(value), true, Vec::new(), None)
    }

    pub fn leaf_shared(&self, value: Arc<Tensor>) -> Var<'_> {
        self.push(value, true, Vec::new(), None)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Arc::new(value), false, Vec::new(), None)
    }

    pub fn constant_shared(&self, value: Arc<Tensor>) -> Var<'_> {
        self.push(value, false, Vec::new(), None)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push(
        &self,
        value: Arc<Tensor>,
        requires_grad: bool,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, requires_grad, parents, backward });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Appends an op result. The backward rule is kept only when some operand
    /// is grad-tracked.
    pub(crate) fn record<'t>(
        &'t self,
        value: impl Into<Arc<Tensor>>,
        operands: &[Var<'t>],
        backward: impl Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    ) -> Var<'t> {
        let tracked = {
            let nodes = self.nodes.borrow();
            operands.iter().any(|v| nodes[v.id].requires_grad)
        };
        if tracked {
            let parents = operands.iter().map(|v| v.id).collect();
            self.push(value.into(), true, parents, Some(Box::new(backward)))
        } else {
            self.push(value.into(), false, Vec::new(), None)
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar `loss`. Every grad-tracked node reachable
    /// from the loss gets its gradient; the tape is cleared afterwards.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, AutodiffError> {
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        let loss_value = &nodes[loss.id].value;
        if loss_value.numel() != 1 {
            return Err(AutodiffError::NotScalar { shape: loss_value.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(Tensor::from_parts(loss_value.shape().to_vec(), vec![1.0]));
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else { continue };
            let Some(grad_out) = grads[id].take() else { continue };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&grad_out, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&parent, grad), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let Some(grad) = grad else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(grad.shape(), nodes[parent].value.shape());
                match &mut grads[parent] {
                    Some(acc) => acc.add_assign(&grad),
                    slot => *slot = Some(grad),
                }
            }
            grads[id] = Some(grad_out);
        }
        Ok(Gradients { grads })
    }
}

/// Result of [`Tape::backward`], indexed by the `Var`s of the swept tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient for `var`, or zeros shaped like `like` when the loss does not
    /// depend on it.
    pub fn get_or_zeros(&self, var: Var<'_>, like: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> Result<f64, AutodiffError> {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.tracked(self.id)
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }
}
