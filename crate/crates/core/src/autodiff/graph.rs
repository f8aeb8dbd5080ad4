use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Computes input gradients from `(output_grad, input_values, output_value)`.
///
/// Returns one entry per input, in order; `None` means "no gradient".
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>> + Send + Sync>;

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Reverse-mode tape. Every op appends a node; [`Graph::backward`] walks the
/// tape from a scalar root in reverse insertion order.
pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
    training: bool,
    bound: HashMap<ParamId, Var>,
    buffer_updates: Vec<(ParamId, Tensor)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Recording graph in training mode (batch statistics in normalization layers).
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
            training: true,
            bound: HashMap::new(),
            buffer_updates: Vec::new(),
        }
    }

    /// Non-recording graph in evaluation mode: no backward closures are kept.
    pub fn inference() -> Self {
        Self {
            record: false,
            training: false,
            ..Self::new()
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor) -> Var {
        let record = self.record;
        self.push(value, Vec::new(), None, record)
    }

    /// Binds a stored parameter as a leaf variable. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.variable(store.value(id).clone());
        self.bound.insert(id, v);
        v
    }

    /// Parameters bound into this graph.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().map(|(&p, &v)| (p, v))
    }

    /// Queue a non-trainable buffer write (normalization running statistics).
    pub fn queue_buffer_update(&mut self, id: ParamId, value: Tensor) {
        self.buffer_updates.push((id, value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Appends an op node. The backward closure is dropped when no input needs a gradient.
    pub fn op(
        &mut self,
        value: Tensor,
        inputs: &[Var],
        backward: impl Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>> + Send + Sync + 'static,
    ) -> Var {
        let requires_grad = self.record && inputs.iter().any(|&v| self.requires_grad(v));
        if requires_grad {
            self.push(value, inputs.to_vec(), Some(Box::new(backward)), true)
        } else {
            self.push(value, Vec::new(), None, false)
        }
    }

    fn push(&mut self, value: Tensor, inputs: Vec<Var>, backward: Option<BackwardFn>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs,
            backward,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of the scalar `root` with respect to every tracked node.
    ///
    /// Intermediate gradients are released once propagated; gradients of leaves survive.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.value(root).len(),
            1,
            "backward root must be a scalar, got shape {:?}",
            self.shape(root)
        );
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        if !self.requires_grad(root) {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::full(self.shape(root).to_vec(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| self.value(*v)).collect();
            let input_grads = backward(&g, &inputs, &node.value);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (v, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(ig.len(), self.nodes[v.0].value.len(), "gradient size for node {}", v.0);
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Gradients { grads }
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not influence the root.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }
}
