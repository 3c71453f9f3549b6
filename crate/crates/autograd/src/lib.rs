//! Reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Graph`] is a tape of operations built per forward pass. Ops append
//! nodes referring to earlier nodes, so reverse creation order is a valid
//! topological order for [`Graph::backward`]. Parameters live outside the
//! tape in a [`ParamStore`]; inserting the same parameter twice yields the
//! same leaf node so shared weights accumulate a single gradient.
//!
//! All values are `ArrayD<f64>` in standard (row-major) layout. Shape
//! mismatches are programming errors and panic.

pub mod fd;
mod op;
mod ops_basic;
mod ops_conv;
mod ops_deform;
mod ops_matmul;
mod ops_nn;
pub mod param;

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};

pub use op::Op;
pub use ops_deform::bilinear_sample;
pub use param::{ParamId, ParamStore};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

pub(crate) struct Node {
    pub value: ArrayD<f64>,
    pub op: Op,
    pub needs_grad: bool,
}

/// Computation tape. Build one per forward/backward pass.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<ArrayD<f64>>>,
    param_nodes: HashMap<usize, NodeId>,
    param_list: Vec<(ParamId, NodeId)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> NodeId {
        debug_assert!(value.iter().all(|v| v.is_finite() || v.is_nan() || v.is_infinite()));
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub(crate) fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Insert a constant; no gradient flows into it.
    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Insert a free leaf that accumulates a gradient (tests, probes).
    pub fn leaf(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Insert a parameter leaf, deduplicated per parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id.0) {
            return n;
        }
        let n = self.push(store.value(id).clone(), Op::Leaf, true);
        self.param_nodes.insert(id.0, n);
        self.param_list.push((id, n));
        n
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Scalar value of a 0-d (or single-element) node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        assert_eq!(v.len(), 1, "scalar() on node with {} elements", v.len());
        *v.iter().next().unwrap()
    }

    /// Gradient of `id` from the last `backward` call, if any reached it.
    pub fn grad(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Run reverse-mode accumulation from a scalar `loss` node.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward() expects a scalar loss node"
        );
        self.grads = vec![None; self.nodes.len()];
        let seed = ArrayD::ones(IxDyn(self.nodes[loss.0].value.shape()));
        self.grads[loss.0] = Some(seed);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(grad) = self.grads[i].clone() else {
                continue;
            };
            let op = self.nodes[i].op.clone_shallow();
            let mut contribs: Vec<(NodeId, ArrayD<f64>)> = Vec::new();
            op.backward(self, NodeId(i), &grad, &mut |p, g| {
                if self.nodes[p.0].needs_grad {
                    contribs.push((p, g));
                }
            });
            for (p, g) in contribs {
                debug_assert_eq!(
                    g.shape(),
                    self.nodes[p.0].value.shape(),
                    "gradient shape mismatch for parent node {}",
                    p.0
                );
                match &mut self.grads[p.0] {
                    Some(acc) => *acc += &g,
                    slot => *slot = Some(g),
                }
            }
        }
    }

    /// Parameter gradients in registration order. Call after `backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, ArrayD<f64>)> {
        let mut out: Vec<(ParamId, ArrayD<f64>)> = self
            .param_list
            .iter()
            .filter_map(|&(pid, nid)| self.grad(nid).map(|g| (pid, g.clone())))
            .collect();
        out.sort_by_key(|(pid, _)| pid.0);
        out
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }
}
