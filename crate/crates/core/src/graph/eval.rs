use super::{Graph, GradVector, Inner, LoopBody, NodeId, NodeKind};
use crate::error::{Error, Result};

/// Per-evaluation record consumed by the backward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Tape {
    graph_id: u64,
    values: Vec<f64>,
    flags: Vec<bool>,
    loops: Vec<LoopTrace>,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct LoopTrace {
    /// One body tape per executed iteration, popped by backward.
    bodies: Vec<Tape>,
    /// Predicate outcome of every test, including the final false one.
    flags: Vec<bool>,
    executed: usize,
    consumed: bool,
}

impl Tape {
    pub fn value(&self, id: NodeId) -> f64 {
        self.values[id.index()]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Branch taken by a select node (`true` = first value operand).
    pub fn select_flag(&self, g: &Graph, id: NodeId) -> Option<bool> {
        match g.kind(id) {
            NodeKind::Select => self.flags.get(g.0.slot[id.index()]).copied(),
            _ => None,
        }
    }

    /// Number of body tapes still stacked for a loop node.
    pub fn loop_stack_depth(&self, g: &Graph, id: NodeId) -> Option<usize> {
        match g.kind(id) {
            NodeKind::Loop(_) => self.loops.get(g.0.slot[id.index()]).map(|t| t.bodies.len()),
            _ => None,
        }
    }

    /// Iterations executed by a loop node during the last forward pass.
    pub fn loop_iterations(&self, g: &Graph, id: NodeId) -> Option<usize> {
        match g.kind(id) {
            NodeKind::Loop(_) => self.loops.get(g.0.slot[id.index()]).map(|t| t.executed),
            _ => None,
        }
    }

    fn reset(&mut self, g: &Inner) {
        self.graph_id = g.id;
        self.values.clear();
        self.values.resize(g.kinds.len(), 0.0);
        self.flags.clear();
        self.flags.resize(g.n_selects, false);
        self.loops.truncate(g.n_loops);
        for t in &mut self.loops {
            t.bodies.clear();
            t.flags.clear();
            t.executed = 0;
            t.consumed = false;
        }
        self.loops.resize_with(g.n_loops, LoopTrace::default);
    }
}

fn domain(node: usize, op: &'static str, detail: impl Into<String>) -> Error {
    Error::Domain {
        node: NodeId::from_index(node),
        op,
        detail: detail.into(),
    }
}

impl Graph {
    /// Evaluates every node; `params` and `inputs` follow
    /// [`Graph::param_names`] and [`Graph::input_names`].
    pub fn forward(&self, params: &[f64], inputs: &[f64]) -> Result<(Vec<f64>, Tape)> {
        let mut tape = Tape::default();
        self.forward_into(params, inputs, &mut tape)?;
        let outs = self.output_values(&tape);
        Ok((outs, tape))
    }

    pub fn output_values(&self, tape: &Tape) -> Vec<f64> {
        self.0.outputs.iter().map(|o| tape.values[o.index()]).collect()
    }

    /// Like [`Graph::forward`] but reuses the buffers of `tape`.
    pub fn forward_into(&self, params: &[f64], inputs: &[f64], tape: &mut Tape) -> Result<()> {
        let g = &*self.0;
        if params.len() != g.param_names.len() {
            return Err(Error::BindingCount {
                what: "parameter",
                expected: g.param_names.len(),
                got: params.len(),
            });
        }
        if inputs.len() != g.input_names.len() {
            return Err(Error::BindingCount {
                what: "input",
                expected: g.input_names.len(),
                got: inputs.len(),
            });
        }
        tape.reset(g);
        for &id in &g.order {
            let i = id.index();
            let ops = g.ops(i);
            let vals = &tape.values;
            let x = |k: usize| vals[ops[k].index()];
            let kind = &g.kinds[i];
            let out = match kind {
                NodeKind::Const(c) => *c,
                NodeKind::Param(_) => params[g.slot[i]],
                NodeKind::Input(_) => inputs[g.slot[i]],
                NodeKind::Add => x(0) + x(1),
                NodeKind::Sub => x(0) - x(1),
                NodeKind::Mul => x(0) * x(1),
                NodeKind::Div => {
                    let d = x(1);
                    if d == 0.0 {
                        return Err(domain(i, "div", "division by zero"));
                    }
                    x(0) / d
                }
                NodeKind::Neg => -x(0),
                NodeKind::Exp => x(0).exp(),
                NodeKind::Ln => {
                    let a = x(0);
                    if !(a > 0.0) {
                        return Err(domain(i, "ln", format!("ln of non-positive value {a:e}")));
                    }
                    a.ln()
                }
                NodeKind::Sqrt => {
                    let a = x(0);
                    if a < 0.0 {
                        return Err(domain(i, "sqrt", format!("sqrt of negative value {a:e}")));
                    }
                    a.sqrt()
                }
                NodeKind::PowConst(c) => {
                    let a = x(0);
                    if c.fract() != 0.0 && a < 0.0 {
                        return Err(domain(
                            i,
                            "powc",
                            format!("negative base {a:e} with non-integer exponent {c}"),
                        ));
                    }
                    a.powf(*c)
                }
                NodeKind::Pow => {
                    let a = x(0);
                    if !(a > 0.0) {
                        return Err(domain(i, "pow", format!("non-positive base {a:e}")));
                    }
                    a.powf(x(1))
                }
                NodeKind::Sum => ops.iter().map(|o| vals[o.index()]).sum(),
                NodeKind::Select => {
                    let flag = x(0) > 0.0;
                    let v = if flag { x(1) } else { x(2) };
                    tape.flags[g.slot[i]] = flag;
                    v
                }
                NodeKind::Converged { tol } => {
                    let (v, r) = (x(0), x(1));
                    if !(r.abs() <= tol * v.abs().max(1.0)) {
                        return Err(Error::NotConverged { node: id, residual: r });
                    }
                    v
                }
                NodeKind::Loop(body) => {
                    let env: Vec<f64> = ops.iter().map(|o| vals[o.index()]).collect();
                    let trace = &mut tape.loops[g.slot[i]];
                    run_loop(id, body, env, trace)?
                }
            };
            if !out.is_finite() {
                return Err(domain(i, kind.name(), "non-finite result"));
            }
            tape.values[i] = out;
        }
        Ok(())
    }

    /// Reverse pass. `seeds` holds one adjoint per designated output.
    pub fn backward(&self, tape: &mut Tape, seeds: &[f64]) -> Result<GradVector> {
        let mut adj = Vec::new();
        self.backward_into(tape, seeds, &mut adj)?;
        Ok(GradVector::new(
            self.0.param_names.clone(),
            self.0.param_nodes.iter().map(|p| adj[p.index()]).collect(),
        ))
    }

    /// Adjoint of the i-th parameter after [`Graph::backward_into`].
    #[inline]
    pub fn param_adjoint(&self, adj: &[f64], i: usize) -> f64 {
        adj[self.0.param_nodes[i].index()]
    }

    #[inline]
    pub fn input_adjoint(&self, adj: &[f64], i: usize) -> f64 {
        adj[self.0.input_nodes[i].index()]
    }

    /// Reverse pass leaving the adjoint of every node in `adj`.
    pub fn backward_into(&self, tape: &mut Tape, seeds: &[f64], adj: &mut Vec<f64>) -> Result<()> {
        let g = &*self.0;
        if tape.graph_id != g.id || tape.values.len() != g.kinds.len() {
            return Err(Error::TapeMismatch);
        }
        if seeds.len() != g.outputs.len() {
            return Err(Error::BindingCount {
                what: "seed",
                expected: g.outputs.len(),
                got: seeds.len(),
            });
        }
        adj.clear();
        adj.resize(g.kinds.len(), 0.0);
        for (o, s) in g.outputs.iter().zip(seeds) {
            adj[o.index()] += s;
        }
        let vals = &tape.values;
        for &id in g.order.iter().rev() {
            let i = id.index();
            let kind = &g.kinds[i];
            let ops = g.ops(i);
            let mut a = adj[i];
            if let NodeKind::Loop(body) = kind {
                let trace = &mut tape.loops[g.slot[i]];
                loop_backward(id, body, trace, a, ops, adj)?;
                continue;
            }
            if a == 0.0 || kind.is_leaf() {
                continue;
            }
            if g.corrupt == Some(kind.name()) {
                a *= 2.0;
            }
            let x = |k: usize| vals[ops[k].index()];
            match kind {
                NodeKind::Add => {
                    adj[ops[0].index()] += a;
                    adj[ops[1].index()] += a;
                }
                NodeKind::Sub => {
                    adj[ops[0].index()] += a;
                    adj[ops[1].index()] -= a;
                }
                NodeKind::Mul => {
                    let (u, v) = (x(0), x(1));
                    adj[ops[0].index()] += a * v;
                    adj[ops[1].index()] += a * u;
                }
                NodeKind::Div => {
                    let (u, v) = (x(0), x(1));
                    adj[ops[0].index()] += a / v;
                    adj[ops[1].index()] -= a * u / (v * v);
                }
                NodeKind::Neg => adj[ops[0].index()] -= a,
                NodeKind::Exp => adj[ops[0].index()] += a * vals[i],
                NodeKind::Ln => adj[ops[0].index()] += a / x(0),
                NodeKind::Sqrt => {
                    let s = vals[i];
                    if s == 0.0 {
                        return Err(domain(i, "sqrt", "derivative undefined at 0"));
                    }
                    adj[ops[0].index()] += a / (2.0 * s);
                }
                NodeKind::PowConst(c) => {
                    if *c != 0.0 {
                        let d = c * x(0).powf(c - 1.0);
                        if !d.is_finite() {
                            return Err(domain(i, "powc", "derivative undefined at base 0"));
                        }
                        adj[ops[0].index()] += a * d;
                    }
                }
                NodeKind::Pow => {
                    let (u, v, out) = (x(0), x(1), vals[i]);
                    adj[ops[0].index()] += a * v * out / u;
                    adj[ops[1].index()] += a * out * u.ln();
                }
                NodeKind::Sum => {
                    for o in ops {
                        adj[o.index()] += a;
                    }
                }
                NodeKind::Select => {
                    let k = if tape.flags[g.slot[i]] { 1 } else { 2 };
                    adj[ops[k].index()] += a;
                }
                NodeKind::Converged { .. } => adj[ops[0].index()] += a,
                NodeKind::Const(_) | NodeKind::Param(_) | NodeKind::Input(_) | NodeKind::Loop(_) => {
                    unreachable!()
                }
            }
        }
        Ok(())
    }
}

fn gather(slots: &[usize], env: &[f64], buf: &mut Vec<f64>) {
    buf.clear();
    buf.extend(slots.iter().map(|&s| env[s]));
}

fn run_loop(id: NodeId, body: &LoopBody, mut env: Vec<f64>, trace: &mut LoopTrace) -> Result<f64> {
    let ns = body.state.len();
    let wrap = |e: Error| Error::InLoop {
        node: id,
        source: Box::new(e),
    };
    let mut buf = Vec::new();
    let mut pred_tape = Tape::default();
    loop {
        gather(&body.predicate_slots, &env, &mut buf);
        body.predicate
            .forward_into(&[], &buf, &mut pred_tape)
            .map_err(wrap)?;
        let flag = pred_tape.values[body.predicate.outputs()[0].index()] > 0.0;
        trace.flags.push(flag);
        if !flag {
            break;
        }
        if trace.executed == body.max_iterations {
            return Err(Error::LoopCap {
                node: id,
                cap: body.max_iterations,
            });
        }
        gather(&body.body_slots, &env, &mut buf);
        let mut t = Tape::default();
        body.body.forward_into(&[], &buf, &mut t).map_err(wrap)?;
        for (k, o) in body.body.outputs().iter().enumerate() {
            env[k] = t.values[o.index()];
        }
        trace.bodies.push(t);
        trace.executed += 1;
    }
    debug_assert!(ns >= 1);
    Ok(env[0])
}

fn loop_backward(
    id: NodeId,
    body: &LoopBody,
    trace: &mut LoopTrace,
    seed: f64,
    ops: &[NodeId],
    adj: &mut [f64],
) -> Result<()> {
    if trace.consumed && trace.executed > 0 {
        return Err(Error::EmptyLoopStack(id));
    }
    trace.consumed = true;
    trace.flags.clear();
    if seed == 0.0 {
        trace.bodies.clear();
        return Ok(());
    }
    let ns = body.state.len();
    let mut state_adj = vec![0.0; ns];
    state_adj[0] = seed;
    let mut captured_adj = vec![0.0; body.captured.len()];
    let mut badj = Vec::new();
    while let Some(mut t) = trace.bodies.pop() {
        body.body
            .backward_into(&mut t, &state_adj, &mut badj)
            .map_err(|e| Error::InLoop {
                node: id,
                source: Box::new(e),
            })?;
        let mut next = vec![0.0; ns];
        for (k, &slot) in body.body_slots.iter().enumerate() {
            let v = body.body.input_adjoint(&badj, k);
            if slot < ns {
                next[slot] += v;
            } else {
                captured_adj[slot - ns] += v;
            }
        }
        state_adj = next;
    }
    for (k, o) in ops.iter().enumerate() {
        let v = if k < ns { state_adj[k] } else { captured_adj[k - ns] };
        adj[o.index()] += v;
    }
    Ok(())
}
