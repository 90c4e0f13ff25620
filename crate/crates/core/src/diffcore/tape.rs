use std::cell::RefCell;
use std::fmt;

use super::Tensor;
use crate::{Error, Result};

pub type NodeId = usize;

/// Vector-Jacobian product of one recorded op.
///
/// Receives the upstream gradient (flat, shaped like the op output) and a
/// mask telling which parents need a gradient. Returns one entry per parent.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send>;

struct Node {
    op: &'static str,
    value: Tensor,
    parents: Vec<NodeId>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Wengert list for reverse-mode differentiation.
///
/// Built fresh for every step and dropped afterwards. Values recorded on the
/// tape are never mutated, so the reverse pass always sees the forward state.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        write!(f, "Var#{}<{}> {:?}", self.id, n.op, n.value)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(1024)),
            grad_enabled: true,
        }
    }

    /// A tape that records values only. Nothing on it can be differentiated.
    pub fn inference() -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(1024)),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.insert("leaf", value, Vec::new(), None, requires_grad && self.grad_enabled)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.insert("const", value, Vec::new(), None, false)
    }

    fn insert(
        &self,
        op: &'static str,
        value: Tensor,
        parents: Vec<NodeId>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            value,
            parents,
            backward,
            requires_grad,
        });
        Var { tape: self, id }
    }

    pub(crate) fn push<F>(&self, op: &'static str, value: Tensor, parents: &[Var<'_>], backward: F) -> Var<'_>
    where
        F: Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send + 'static,
    {
        let requires = self.grad_enabled && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        let ids = parents.iter().map(|p| p.id).collect();
        let bw: Option<BackwardFn> = if requires { Some(Box::new(backward)) } else { None };
        self.insert(op, value, ids, bw, requires)
    }

    pub fn value(&self, id: NodeId) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Grads> {
        let len = self.value(root.id).len();
        if len != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got {len} elements"
            )));
        }
        self.backward_seeded(root, &Tensor::scalar(1.0))
    }

    /// Reverse pass from an arbitrary node with an explicit upstream gradient.
    pub fn backward_seeded(&self, root: Var<'_>, seed: &Tensor) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        if seed.len() != nodes[root.id].value.len() {
            return Err(Error::contract("seed gradient does not match root shape"));
        }
        for node in nodes.iter().take(root.id + 1) {
            if !node.value.is_finite() {
                return Err(Error::Numeric {
                    op: node.op.to_string(),
                    detail: "non-finite value in forward output".into(),
                });
            }
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.id] = Some(seed.to_vec());
        let mut mask = Vec::new();
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            mask.clear();
            mask.extend(node.parents.iter().map(|&p| nodes[p].requires_grad));
            let parent_grads = backward(&g, &mask);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (k, pg) in parent_grads.into_iter().enumerate() {
                let Some(pg) = pg else { continue };
                let p = node.parents[k];
                if !mask[k] {
                    continue;
                }
                if pg.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Numeric {
                        op: format!("{} (backward)", node.op),
                        detail: "non-finite gradient".into(),
                    });
                }
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
            .collect();
        Ok(Grads { grads })
    }
}

/// Gradients produced by one reverse pass, indexed by node.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of the given shape when it was unreachable.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Tensor {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Scalar value. Panics when the variable holds more than one element.
    pub fn item(&self) -> f64 {
        self.value().item()
    }
}
