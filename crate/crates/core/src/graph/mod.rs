//! Computational graphs of primitive numeric operations.
//!
//! A [`Graph`] is validated and topologically ordered once, then evaluated
//! any number of times. Every forward evaluation fills a [`Tape`] with the
//! value of each node (plus per-iteration stacks for loop blocks), and
//! [`Graph::backward`] walks the nodes in reverse order to accumulate
//! adjoints for the parameter leaves.
//!
//! Graphs are immutable and cheap to clone; one instance can be evaluated
//! concurrently from several threads as long as each uses its own tape.

mod builder;
mod eval;

pub use builder::GraphBuilder;
pub use eval::Tape;

use std::collections::{BinaryHeap, HashSet};
use std::cmp::Reverse;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use indexmap::IndexMap;
use serde::ser::SerializeMap;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Dense index of a node inside one graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct NodeId(pub(crate) u32);

impl NodeId {
    pub fn from_index(index: usize) -> Self {
        NodeId(index as u32)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

#[derive(Clone, Debug)]
pub enum NodeKind {
    Const(f64),
    Param(String),
    Input(String),
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Ln,
    Sqrt,
    /// `x^c` for a fixed exponent.
    PowConst(f64),
    /// `x^y`, both operands variable; requires `x > 0`.
    Pow,
    Sum,
    /// Operands `[pred, a, b]`: yields `a` when `pred > 0`, else `b`.
    Select,
    /// Operands `[value, residual]`: passes `value` through and fails the
    /// forward pass when `|residual| > tol * max(1, |value|)`.
    Converged { tol: f64 },
    Loop(Arc<LoopBody>),
}

impl NodeKind {
    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::Const(_) => "const",
            NodeKind::Param(_) => "param",
            NodeKind::Input(_) => "input",
            NodeKind::Add => "add",
            NodeKind::Sub => "sub",
            NodeKind::Mul => "mul",
            NodeKind::Div => "div",
            NodeKind::Neg => "neg",
            NodeKind::Exp => "exp",
            NodeKind::Ln => "ln",
            NodeKind::Sqrt => "sqrt",
            NodeKind::PowConst(_) => "powc",
            NodeKind::Pow => "pow",
            NodeKind::Sum => "sum",
            NodeKind::Select => "select",
            NodeKind::Converged { .. } => "converged",
            NodeKind::Loop(_) => "loop",
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(
            self,
            NodeKind::Const(_) | NodeKind::Param(_) | NodeKind::Input(_)
        )
    }

    fn check_arity(&self, node: NodeId, got: usize) -> Result<()> {
        let (ok, expected) = match self {
            NodeKind::Const(_) | NodeKind::Param(_) | NodeKind::Input(_) => (got == 0, "0".into()),
            NodeKind::Add
            | NodeKind::Sub
            | NodeKind::Mul
            | NodeKind::Div
            | NodeKind::Pow
            | NodeKind::Converged { .. } => (got == 2, "2".into()),
            NodeKind::Neg
            | NodeKind::Exp
            | NodeKind::Ln
            | NodeKind::Sqrt
            | NodeKind::PowConst(_) => (got == 1, "1".into()),
            NodeKind::Sum => (got >= 1, "at least 1".into()),
            NodeKind::Select => (got == 3, "3".into()),
            NodeKind::Loop(body) => {
                let n = body.state.len() + body.captured.len();
                (got == n, n.to_string())
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Arity {
                node,
                op: self.name(),
                expected,
                got,
            })
        }
    }
}

#[derive(Clone, Debug)]
pub struct NodeSpec {
    pub kind: NodeKind,
    pub operands: Vec<NodeId>,
}

impl NodeSpec {
    pub fn new(kind: NodeKind, operands: Vec<NodeId>) -> Self {
        NodeSpec { kind, operands }
    }

    pub fn leaf(kind: NodeKind) -> Self {
        NodeSpec {
            kind,
            operands: Vec::new(),
        }
    }
}

/// A while-loop: `state` is updated by `body` as long as `predicate`
/// evaluates to a value `> 0`.
///
/// The body graph has one output per state variable (in order) and may read
/// any state or captured variable through input leaves of the same name. The
/// predicate graph has a single output. Neither may contain parameter leaves;
/// parameters enter through captured operands of the loop node, which keeps
/// their adjoints in the enclosing graph.
#[derive(Debug)]
pub struct LoopBody {
    state: Vec<String>,
    captured: Vec<String>,
    body: Graph,
    predicate: Graph,
    max_iterations: usize,
    // env slot for every input leaf of body / predicate
    body_slots: Vec<usize>,
    predicate_slots: Vec<usize>,
}

pub const DEFAULT_LOOP_CAP: usize = 100;

impl LoopBody {
    pub fn new(
        state: &[&str],
        captured: &[&str],
        body: Graph,
        predicate: Graph,
    ) -> Result<Self> {
        let state: Vec<String> = state.iter().map(|s| s.to_string()).collect();
        let captured: Vec<String> = captured.iter().map(|s| s.to_string()).collect();
        if state.is_empty() {
            return Err(Error::InvalidGraph("loop needs at least one state variable".into()));
        }
        let env: Vec<&String> = state.iter().chain(captured.iter()).collect();
        let mut seen = HashSet::new();
        for name in &env {
            if !seen.insert(name.as_str()) {
                return Err(Error::DuplicateLeaf(name.to_string()));
            }
        }
        if body.outputs().len() != state.len() {
            return Err(Error::InvalidGraph(format!(
                "loop body has {} outputs for {} state variables",
                body.outputs().len(),
                state.len()
            )));
        }
        if predicate.outputs().len() != 1 {
            return Err(Error::InvalidGraph("loop predicate must have one output".into()));
        }
        let slots = |g: &Graph, what: &str| -> Result<Vec<usize>> {
            if !g.param_names().is_empty() {
                return Err(Error::InvalidGraph(format!(
                    "loop {what} may not contain parameter leaves"
                )));
            }
            g.input_names()
                .iter()
                .map(|n| {
                    env.iter().position(|e| *e == n).ok_or_else(|| Error::Unbound {
                        what: "loop variable",
                        name: n.clone(),
                    })
                })
                .collect()
        };
        let body_slots = slots(&body, "body")?;
        let predicate_slots = slots(&predicate, "predicate")?;
        Ok(LoopBody {
            state,
            captured,
            body,
            predicate,
            max_iterations: DEFAULT_LOOP_CAP,
            body_slots,
            predicate_slots,
        })
    }

    pub fn with_max_iterations(mut self, cap: usize) -> Self {
        self.max_iterations = cap;
        self
    }

    pub fn max_iterations(&self) -> usize {
        self.max_iterations
    }

    pub fn state_names(&self) -> &[String] {
        &self.state
    }

    pub fn captured_names(&self) -> &[String] {
        &self.captured
    }
}

#[derive(Debug)]
pub(crate) struct Inner {
    pub(crate) id: u64,
    pub(crate) kinds: Vec<NodeKind>,
    pub(crate) operands: Vec<NodeId>,
    pub(crate) op_start: Vec<usize>,
    pub(crate) order: Vec<NodeId>,
    pub(crate) outputs: Vec<NodeId>,
    pub(crate) param_names: Vec<String>,
    pub(crate) param_nodes: Vec<NodeId>,
    pub(crate) input_names: Vec<String>,
    pub(crate) input_nodes: Vec<NodeId>,
    /// Param/Input: binding index. Select: flag slot. Loop: trace slot.
    pub(crate) slot: Vec<usize>,
    pub(crate) n_selects: usize,
    pub(crate) n_loops: usize,
    pub(crate) corrupt: Option<&'static str>,
}

impl Inner {
    #[inline]
    pub(crate) fn ops(&self, i: usize) -> &[NodeId] {
        &self.operands[self.op_start[i]..self.op_start[i + 1]]
    }
}

/// A validated, immutable computational graph.
#[derive(Clone, Debug)]
pub struct Graph(pub(crate) Arc<Inner>);

/// Edge and vertex counts of a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct GraphStats {
    pub edges: usize,
    pub vertices: usize,
}

impl Graph {
    /// Validates `specs` and fixes a deterministic topological order.
    ///
    /// Operands may refer to any spec index; the order is Kahn's algorithm
    /// with the smallest ready index first, so specs that are already in
    /// dependency order keep their order.
    pub fn new(specs: Vec<NodeSpec>, outputs: &[NodeId]) -> Result<Graph> {
        let n = specs.len();
        let mut seen_leaves = HashSet::new();
        let mut kinds = Vec::with_capacity(n);
        let mut operands = Vec::new();
        let mut op_start = Vec::with_capacity(n + 1);
        for (i, spec) in specs.into_iter().enumerate() {
            let id = NodeId::from_index(i);
            spec.kind.check_arity(id, spec.operands.len())?;
            for &op in &spec.operands {
                if op.index() >= n {
                    return Err(Error::DanglingOperand { node: id, operand: op });
                }
            }
            match &spec.kind {
                NodeKind::Param(name) | NodeKind::Input(name) => {
                    if !seen_leaves.insert(name.clone()) {
                        return Err(Error::DuplicateLeaf(name.clone()));
                    }
                }
                NodeKind::Const(v) | NodeKind::PowConst(v) if !v.is_finite() => {
                    return Err(Error::InvalidGraph(format!("node {id}: non-finite constant")));
                }
                NodeKind::Converged { tol } if !(*tol >= 0.0) => {
                    return Err(Error::InvalidGraph(format!("node {id}: negative tolerance")));
                }
                _ => {}
            }
            op_start.push(operands.len());
            operands.extend_from_slice(&spec.operands);
            kinds.push(spec.kind);
        }
        op_start.push(operands.len());

        for &o in outputs {
            if o.index() >= n {
                return Err(Error::InvalidGraph(format!("output {o} does not exist")));
            }
        }

        // Kahn's algorithm, smallest ready index first.
        let mut indegree = vec![0usize; n];
        let mut consumers: Vec<Vec<u32>> = vec![Vec::new(); n];
        for i in 0..n {
            for op in &operands[op_start[i]..op_start[i + 1]] {
                indegree[i] += 1;
                consumers[op.index()].push(i as u32);
            }
        }
        let mut ready: BinaryHeap<Reverse<u32>> = (0..n as u32)
            .filter(|&i| indegree[i as usize] == 0)
            .map(Reverse)
            .collect();
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse(i)) = ready.pop() {
            order.push(NodeId(i));
            for &c in &consumers[i as usize] {
                indegree[c as usize] -= 1;
                if indegree[c as usize] == 0 {
                    ready.push(Reverse(c));
                }
            }
        }
        if order.len() < n {
            let stuck = (0..n).find(|&i| indegree[i] > 0).unwrap();
            return Err(Error::Cycle(NodeId::from_index(stuck)));
        }

        let mut slot = vec![0usize; n];
        let mut param_names = Vec::new();
        let mut param_nodes = Vec::new();
        let mut input_names = Vec::new();
        let mut input_nodes = Vec::new();
        let mut n_selects = 0;
        let mut n_loops = 0;
        for (i, kind) in kinds.iter().enumerate() {
            match kind {
                NodeKind::Param(name) => {
                    slot[i] = param_names.len();
                    param_names.push(name.clone());
                    param_nodes.push(NodeId::from_index(i));
                }
                NodeKind::Input(name) => {
                    slot[i] = input_names.len();
                    input_names.push(name.clone());
                    input_nodes.push(NodeId::from_index(i));
                }
                NodeKind::Select => {
                    slot[i] = n_selects;
                    n_selects += 1;
                }
                NodeKind::Loop(_) => {
                    slot[i] = n_loops;
                    n_loops += 1;
                }
                _ => {}
            }
        }

        Ok(Graph(Arc::new(Inner {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            kinds,
            operands,
            op_start,
            order,
            outputs: outputs.to_vec(),
            param_names,
            param_nodes,
            input_names,
            input_nodes,
            slot,
            n_selects,
            n_loops,
            corrupt: None,
        })))
    }

    pub fn len(&self) -> usize {
        self.0.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.kinds.is_empty()
    }

    pub fn kind(&self, id: NodeId) -> &NodeKind {
        &self.0.kinds[id.index()]
    }

    pub fn operands(&self, id: NodeId) -> &[NodeId] {
        self.0.ops(id.index())
    }

    pub fn order(&self) -> &[NodeId] {
        &self.0.order
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.0.outputs
    }

    pub fn param_names(&self) -> &[String] {
        &self.0.param_names
    }

    pub fn param_node(&self, i: usize) -> NodeId {
        self.0.param_nodes[i]
    }

    pub fn input_names(&self) -> &[String] {
        &self.0.input_names
    }

    pub fn interior_count(&self) -> usize {
        self.0.kinds.iter().filter(|k| !k.is_leaf()).count()
    }

    /// Edges are operand references, vertices are nodes. Loop bodies count as
    /// a single vertex of the enclosing graph.
    pub fn stats(&self) -> GraphStats {
        GraphStats {
            edges: self.0.operands.len(),
            vertices: self.len(),
        }
    }

    /// One line per edge, `src -> dst opkind`, in topological order.
    pub fn dump_edges(&self) -> String {
        let mut out = String::new();
        for &id in &self.0.order {
            let name = self.0.kinds[id.index()].name();
            for op in self.0.ops(id.index()) {
                out.push_str(&format!("{} -> {} {}\n", op.0, id.0, name));
            }
        }
        out
    }

    /// Positional parameter vector for this graph from a name map.
    pub fn bind_params(&self, values: &IndexMap<String, f64>) -> Result<Vec<f64>> {
        self.0
            .param_names
            .iter()
            .map(|n| {
                values.get(n).copied().ok_or_else(|| Error::Unbound {
                    what: "parameter",
                    name: n.clone(),
                })
            })
            .collect()
    }

    pub fn bind_inputs(&self, values: &[(&str, f64)]) -> Result<Vec<f64>> {
        self.0
            .input_names
            .iter()
            .map(|n| {
                values
                    .iter()
                    .find(|(k, _)| *k == n)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| Error::Unbound {
                        what: "input",
                        name: n.clone(),
                    })
            })
            .collect()
    }

    /// Test hook: returns a copy whose backward rule for `op` is wrong by a
    /// factor of two. Used as a negative control for gradient checking.
    #[doc(hidden)]
    pub fn with_corrupted_adjoint(&self, op: &str) -> Result<Graph> {
        let names = [
            "add", "sub", "mul", "div", "neg", "exp", "ln", "sqrt", "powc", "pow", "sum",
        ];
        let op = names
            .iter()
            .find(|n| **n == op)
            .ok_or_else(|| Error::Config(format!("unknown op `{op}`")))?;
        let inner = &*self.0;
        Ok(Graph(Arc::new(Inner {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            kinds: inner.kinds.clone(),
            operands: inner.operands.clone(),
            op_start: inner.op_start.clone(),
            order: inner.order.clone(),
            outputs: inner.outputs.clone(),
            param_names: inner.param_names.clone(),
            param_nodes: inner.param_nodes.clone(),
            input_names: inner.input_names.clone(),
            input_nodes: inner.input_nodes.clone(),
            slot: inner.slot.clone(),
            n_selects: inner.n_selects,
            n_loops: inner.n_loops,
            corrupt: Some(op),
        })))
    }
}

/// Named gradient, one entry per parameter leaf, in leaf order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradVector {
    names: Vec<String>,
    values: Vec<f64>,
}

impl GradVector {
    pub fn new(names: Vec<String>, values: Vec<f64>) -> Self {
        assert_eq!(names.len(), values.len());
        GradVector { names, values }
    }

    pub fn zeros(names: &[String]) -> Self {
        GradVector {
            names: names.to_vec(),
            values: vec![0.0; names.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter().copied())
    }

    pub fn to_map(&self) -> IndexMap<String, f64> {
        self.iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}

impl Serialize for GradVector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.len()))?;
        for (k, v) in self.iter() {
            map.serialize_entry(k, &v)?;
        }
        map.end()
    }
}
