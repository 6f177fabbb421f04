use std::collections::HashMap;
use std::sync::Arc;

use super::{Graph, LoopBody, NodeId, NodeKind, NodeSpec};
use crate::error::Result;

/// Incremental graph construction. Parameter and input leaves are
/// deduplicated by name, so a name used twice refers to one leaf.
#[derive(Default)]
pub struct GraphBuilder {
    specs: Vec<NodeSpec>,
    leaves: HashMap<String, NodeId>,
    consts: HashMap<u64, NodeId>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    fn push(&mut self, kind: NodeKind, operands: Vec<NodeId>) -> NodeId {
        let id = NodeId::from_index(self.specs.len());
        self.specs.push(NodeSpec::new(kind, operands));
        id
    }

    pub fn param(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            return id;
        }
        let id = self.push(NodeKind::Param(name.to_string()), vec![]);
        self.leaves.insert(name.to_string(), id);
        id
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            return id;
        }
        let id = self.push(NodeKind::Input(name.to_string()), vec![]);
        self.leaves.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, v: f64) -> NodeId {
        if let Some(&id) = self.consts.get(&v.to_bits()) {
            return id;
        }
        let id = self.push(NodeKind::Const(v), vec![]);
        self.consts.insert(v.to_bits(), id);
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(NodeKind::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(NodeKind::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(NodeKind::Mul, vec![a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(NodeKind::Div, vec![a, b])
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.push(NodeKind::Neg, vec![a])
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(NodeKind::Exp, vec![a])
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.push(NodeKind::Ln, vec![a])
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.push(NodeKind::Sqrt, vec![a])
    }

    pub fn powc(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(NodeKind::PowConst(c), vec![a])
    }

    pub fn pow(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(NodeKind::Pow, vec![a, b])
    }

    pub fn sum(&mut self, terms: &[NodeId]) -> NodeId {
        self.push(NodeKind::Sum, terms.to_vec())
    }

    /// `a` when `pred > 0`, otherwise `b`.
    pub fn select(&mut self, pred: NodeId, a: NodeId, b: NodeId) -> NodeId {
        self.push(NodeKind::Select, vec![pred, a, b])
    }

    pub fn converged(&mut self, value: NodeId, residual: NodeId, tol: f64) -> NodeId {
        self.push(NodeKind::Converged { tol }, vec![value, residual])
    }

    /// Adds a loop node; `init` binds the state variables and `captured` the
    /// captured variables, in the order given to [`LoopBody::new`].
    pub fn loop_block(&mut self, body: LoopBody, init: &[NodeId], captured: &[NodeId]) -> NodeId {
        let mut ops = init.to_vec();
        ops.extend_from_slice(captured);
        self.push(NodeKind::Loop(Arc::new(body)), ops)
    }

    pub fn mul_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let k = self.constant(c);
        self.mul(a, k)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let k = self.constant(c);
        self.add(a, k)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.mul(a, a)
    }

    pub fn max(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        self.select(d, a, b)
    }

    pub fn min(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(b, a);
        self.select(d, a, b)
    }

    pub fn max_const(&mut self, a: NodeId, floor: f64) -> NodeId {
        let f = self.constant(floor);
        self.max(a, f)
    }

    pub fn build(self, outputs: &[NodeId]) -> Result<Graph> {
        Graph::new(self.specs, outputs)
    }
}
