//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied during one forward pass. Values are
//! computed eagerly; each op stores a closure producing input gradients from
//! its output gradient. A graph supports exactly one backward pass: a second
//! call is rejected.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Produces one optional gradient per op input, given
/// `(output grad, input values, which inputs need a grad)`.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &[bool]) -> Result<Vec<Option<Tensor>>>>;

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of every node after a backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            backward: None,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false, None)
    }

    /// A free leaf that receives a gradient (used for inputs under test).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true, None)
    }

    /// A leaf bound to a stored parameter. Frozen parameters behave as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push_leaf(p.tensor.clone(), p.trainable, Some(id))
    }

    /// Record an op whose value has already been computed.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs: inputs.to_vec(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Run the backward pass from a scalar `loss` and return all node gradients.
    pub fn gradients(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Graph(
                "backward already ran on this graph; record a new forward pass".into(),
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let loss_shape = self.nodes[loss.0].value.shape().to_vec();
        grads[loss.0] = Some(Tensor::full(&loss_shape, 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let in_grads = backward(&g, &inputs, &needs)?;
            for ((v, need), ig) in node.inputs.iter().zip(&needs).zip(in_grads) {
                if !need {
                    continue;
                }
                let Some(ig) = ig else { continue };
                if ig.shape() != self.nodes[v.0].value.shape() {
                    return Err(Error::Graph(format!(
                        "gradient shape {:?} does not match value shape {:?}",
                        ig.shape(),
                        self.nodes[v.0].value.shape()
                    )));
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot => *slot = Some(ig),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backward pass that accumulates (sums) gradients into the trainable
    /// parameters bound in this graph. Bound parameters the loss does not
    /// reach receive a zero gradient.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let mut grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(id) = node.param else { continue };
            if !node.requires_grad {
                continue;
            }
            let g = grads.grads[i]
                .take()
                .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
            let p = store.get_mut(id);
            match &mut p.grad {
                Some(acc) if acc.shape() == g.shape() => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }
}

/// Binds each parameter to at most one leaf per graph.
#[derive(Default)]
pub struct ParamBinder {
    map: HashMap<ParamId, Var>,
    frozen: bool,
}

impl ParamBinder {
    pub fn new() -> Self {
        Self::default()
    }

    /// A binder that treats every parameter as a constant (inference only).
    pub fn frozen() -> Self {
        Self {
            map: HashMap::new(),
            frozen: true,
        }
    }

    pub fn bind(&mut self, g: &mut Graph, store: &ParamStore, id: ParamId) -> Var {
        let frozen = self.frozen;
        *self.map.entry(id).or_insert_with(|| {
            if frozen {
                g.constant(store.get(id).tensor.clone())
            } else {
                g.param(store, id)
            }
        })
    }

    pub fn bind_name(&mut self, g: &mut Graph, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        Ok(self.bind(g, store, id))
    }
}
