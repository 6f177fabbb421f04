//! RMSE cost and its gradient by numerical (forward-difference) and
//! automatic (reverse-mode) differentiation, single- and multi-objective.

use indexmap::IndexMap;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{bias_inputs, Dataset, DatasetKind};
use crate::error::{Error, Result};
use crate::exec::{fold_points, Exec};
use crate::graph::{GradVector, Graph, Tape};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    #[default]
    Ad,
    Nd,
}

impl std::str::FromStr for Engine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ad" => Ok(Engine::Ad),
            "nd" => Ok(Engine::Nd),
            _ => Err(Error::Config(format!("unknown engine `{s}` (ad | nd)"))),
        }
    }
}

impl std::fmt::Display for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Engine::Ad => "ad",
            Engine::Nd => "nd",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    #[default]
    None,
    /// Residuals divided by `max(|meas|, floor)`.
    PerPoint,
}

#[derive(Clone, Debug)]
pub struct ObjectiveSpec {
    pub graph: Graph,
    pub dataset: Dataset,
    pub weight: f64,
    /// Divisor of this objective's RMSE; see [`Problem::scale_by_data`].
    pub scale: f64,
}

impl ObjectiveSpec {
    pub fn new(graph: Graph, dataset: Dataset) -> Self {
        ObjectiveSpec {
            graph,
            dataset,
            weight: 1.0,
            scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct CostSpec {
    pub normalization: Normalization,
    pub objectives: Vec<ObjectiveSpec>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradResult {
    pub cost: f64,
    pub grad: GradVector,
    pub model_eval_count: u64,
    pub graph_traversal_count: u64,
}

/// Cost value with the RMSE of every objective.
#[derive(Clone, Debug)]
pub struct CostEval {
    pub cost: f64,
    pub rmse: Vec<f64>,
    pub model_eval_count: u64,
}

/// `sqrt(Σ (meas - sim)² / m)`.
pub fn rmse(meas: &[f64], sim: &[f64]) -> Result<f64> {
    if meas.len() != sim.len() {
        return Err(Error::LengthMismatch(meas.len(), sim.len()));
    }
    if meas.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let s: f64 = meas.iter().zip(sim).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((s / meas.len() as f64).sqrt())
}

#[derive(Clone, Debug)]
struct Objective {
    graph: Graph,
    kind: DatasetKind,
    /// `m × n_inputs`, row-major.
    inputs: Vec<f64>,
    n_inputs: usize,
    meas: Vec<f64>,
    w: Vec<f64>,
    weight: f64,
    scale: f64,
    /// Problem index of every graph parameter.
    index: Vec<usize>,
}

impl Objective {
    fn m(&self) -> usize {
        self.meas.len()
    }

    fn x(&self, j: usize) -> &[f64] {
        &self.inputs[j * self.n_inputs..(j + 1) * self.n_inputs]
    }

    fn local(&self, p: &[f64]) -> Vec<f64> {
        self.index.iter().map(|&i| p[i]).collect()
    }

    /// Multiplier turning this objective's RMSE into its cost term.
    fn factor(&self) -> f64 {
        self.weight / self.scale
    }
}

struct Work {
    tape: Tape,
    adj: Vec<f64>,
    p: Vec<f64>,
}

/// A cost function bound to data: a set of objectives sharing parameters by
/// name. The parameter vector follows [`Problem::names`].
#[derive(Clone, Debug)]
pub struct Problem {
    names: Vec<String>,
    objectives: Vec<Objective>,
    exec: Exec,
}

impl Problem {
    pub fn new(spec: &CostSpec) -> Result<Problem> {
        if spec.objectives.is_empty() {
            return Err(Error::Config("cost needs at least one objective".into()));
        }
        let mut names: Vec<String> = Vec::new();
        let mut objectives = Vec::new();
        for o in &spec.objectives {
            if o.dataset.is_empty() {
                return Err(Error::EmptyDataset);
            }
            if !(o.weight > 0.0) || !(o.scale > 0.0) {
                return Err(Error::Config("objective weights and scales must be > 0".into()));
            }
            let index = o
                .graph
                .param_names()
                .iter()
                .map(|n| match names.iter().position(|x| x == n) {
                    Some(i) => i,
                    None => {
                        names.push(n.clone());
                        names.len() - 1
                    }
                })
                .collect();
            let bias: Vec<_> = o.dataset.points().iter().map(|p| p.bias()).collect();
            let meas = o.dataset.values();
            let floor = o.dataset.kind.normalization_floor();
            let w = match spec.normalization {
                Normalization::None => vec![1.0; meas.len()],
                Normalization::PerPoint => meas.iter().map(|v| 1.0 / v.abs().max(floor)).collect(),
            };
            objectives.push(Objective {
                graph: o.graph.clone(),
                kind: o.dataset.kind,
                inputs: bias_inputs(&o.graph, &bias)?,
                n_inputs: o.graph.input_names().len(),
                meas,
                w,
                weight: o.weight,
                scale: o.scale,
                index,
            });
        }
        Ok(Problem {
            names,
            objectives,
            exec: Exec::default(),
        })
    }

    /// Single objective, weight and scale 1, no normalization.
    pub fn single(graph: &Graph, dataset: &Dataset) -> Result<Problem> {
        Problem::new(&CostSpec {
            normalization: Normalization::None,
            objectives: vec![ObjectiveSpec::new(graph.clone(), dataset.clone())],
        })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_params(&self) -> usize {
        self.names.len()
    }

    /// Total number of bias points over all objectives.
    pub fn m_total(&self) -> usize {
        self.objectives.iter().map(|o| o.m()).sum()
    }

    pub fn n_objectives(&self) -> usize {
        self.objectives.len()
    }

    pub fn objective_kind(&self, k: usize) -> DatasetKind {
        self.objectives[k].kind
    }

    pub fn scales(&self) -> Vec<f64> {
        self.objectives.iter().map(|o| o.scale).collect()
    }

    /// Sets every objective scale to the RMS of its (weighted) measured
    /// values, so each cost term is a relative RMSE.
    pub fn scale_by_data(&mut self) {
        for o in &mut self.objectives {
            let s: f64 = o.meas.iter().zip(&o.w).map(|(m, w)| (m * w).powi(2)).sum();
            let rms = (s / o.m() as f64).sqrt();
            o.scale = if rms > 0.0 { rms } else { 1.0 };
        }
    }

    pub fn vector(&self, values: &IndexMap<String, f64>) -> Result<Vec<f64>> {
        self.names
            .iter()
            .map(|n| values.get(n).copied().ok_or_else(|| Error::MissingParam(n.clone())))
            .collect()
    }

    pub fn map(&self, p: &[f64]) -> IndexMap<String, f64> {
        self.names.iter().cloned().zip(p.iter().copied()).collect()
    }

    fn check(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.names.len() {
            return Err(Error::LengthMismatch(p.len(), self.names.len()));
        }
        Ok(())
    }

    fn work(o: &Objective, p: &[f64]) -> impl Fn() -> Work + Sync + Send {
        let local = o.local(p);
        move || Work {
            tape: Tape::default(),
            adj: Vec::new(),
            p: local.clone(),
        }
    }

    /// Model output of objective `k` at every bias point.
    pub fn simulate(&self, k: usize, p: &[f64]) -> Result<Vec<f64>> {
        self.check(p)?;
        let o = &self.objectives[k];
        let mut out = Vec::with_capacity(o.m());
        fold_points(
            self.exec,
            o.m(),
            Self::work(o, p),
            |w, j| {
                o.graph.forward_into(&w.p, o.x(j), &mut w.tape)?;
                Ok(w.tape.value(o.graph.outputs()[0]))
            },
            &mut out,
            |v, s| v.push(s),
        )?;
        Ok(out)
    }

    /// Cost `Σ_k weight_k · E_k / scale_k`.
    pub fn evaluate(&self, p: &[f64]) -> Result<CostEval> {
        self.check(p)?;
        let mut cost = 0.0;
        let mut rmse = Vec::with_capacity(self.objectives.len());
        let mut evals = 0;
        for (k, o) in self.objectives.iter().enumerate() {
            let sim = self.simulate(k, p)?;
            let s: f64 = (0..o.m())
                .map(|j| {
                    let r = o.w[j] * (o.meas[j] - sim[j]);
                    r * r
                })
                .sum();
            let e = (s / o.m() as f64).sqrt();
            cost += o.factor() * e;
            rmse.push(e);
            evals += o.m() as u64;
        }
        Ok(CostEval {
            cost,
            rmse,
            model_eval_count: evals,
        })
    }

    pub fn cost(&self, p: &[f64]) -> Result<f64> {
        Ok(self.evaluate(p)?.cost)
    }

    pub fn gradient(&self, p: &[f64], engine: Engine) -> Result<GradResult> {
        match engine {
            Engine::Ad => self.ad_gradient(p),
            Engine::Nd => {
                let d = default_deltas(p);
                self.nd_gradient(p, &d)
            }
        }
    }

    /// One forward and one backward traversal per bias point; the backward
    /// pass of point `j` is seeded with `-w_j r_j`, and the sum over points
    /// is scaled by `1/(m E)`.
    pub fn ad_gradient(&self, p: &[f64]) -> Result<GradResult> {
        self.check(p)?;
        let mut grad = vec![0.0; self.names.len()];
        let mut cost = 0.0;
        let mut traversals = 0u64;
        let mut evals = 0u64;
        for o in &self.objectives {
            let n = o.index.len();
            let mut acc = (0.0, vec![0.0; n]);
            fold_points(
                self.exec,
                o.m(),
                Self::work(o, p),
                |w, j| {
                    o.graph.forward_into(&w.p, o.x(j), &mut w.tape)?;
                    let sim = w.tape.value(o.graph.outputs()[0]);
                    let r = o.w[j] * (o.meas[j] - sim);
                    o.graph
                        .backward_into(&mut w.tape, &[-r * o.w[j]], &mut w.adj)?;
                    let g: Vec<f64> = (0..n).map(|i| o.graph.param_adjoint(&w.adj, i)).collect();
                    Ok((r * r, g))
                },
                &mut acc,
                |a, (r2, g)| {
                    a.0 += r2;
                    for (x, y) in a.1.iter_mut().zip(g) {
                        *x += y;
                    }
                },
            )?;
            let m = o.m() as f64;
            let e = (acc.0 / m).sqrt();
            cost += o.factor() * e;
            if e > 0.0 {
                let s = o.factor() / (m * e);
                for (l, &i) in o.index.iter().enumerate() {
                    grad[i] += s * acc.1[l];
                }
            }
            traversals += 2 * o.m() as u64;
            evals += o.m() as u64;
        }
        Ok(GradResult {
            cost,
            grad: GradVector::new(self.names.clone(), grad),
            model_eval_count: evals,
            graph_traversal_count: traversals,
        })
    }

    /// Forward differences: per bias point one base evaluation plus one
    /// perturbed evaluation for every parameter of the problem. Objectives
    /// are treated as black boxes, so every objective is evaluated for every
    /// perturbation.
    pub fn nd_gradient(&self, p: &[f64], deltas: &[f64]) -> Result<GradResult> {
        self.check(p)?;
        let n = self.names.len();
        if deltas.len() != n {
            return Err(Error::LengthMismatch(deltas.len(), n));
        }
        if let Some(i) = deltas.iter().position(|d| *d == 0.0 || !d.is_finite()) {
            return Err(Error::ZeroStep(self.names[i].clone()));
        }
        let mut cost = 0.0;
        let mut cost_d = vec![0.0; n];
        let mut evals = 0u64;
        for o in &self.objectives {
            // local slot of every problem parameter, if present in this graph
            let mut slot = vec![None; n];
            for (l, &i) in o.index.iter().enumerate() {
                slot[i] = Some(l);
            }
            let mut acc = (0.0, vec![0.0; n]);
            fold_points(
                self.exec,
                o.m(),
                Self::work(o, p),
                |w, j| {
                    let out = o.graph.outputs()[0];
                    o.graph.forward_into(&w.p, o.x(j), &mut w.tape)?;
                    let r = o.w[j] * (o.meas[j] - w.tape.value(out));
                    let mut rd = vec![0.0; n];
                    for i in 0..n {
                        let l = slot[i];
                        if let Some(l) = l {
                            w.p[l] = p[i] + deltas[i];
                        }
                        let res = o.graph.forward_into(&w.p, o.x(j), &mut w.tape);
                        if let Some(l) = l {
                            w.p[l] = p[i];
                        }
                        res?;
                        let ri = o.w[j] * (o.meas[j] - w.tape.value(out));
                        rd[i] = ri * ri;
                    }
                    Ok((r * r, rd))
                },
                &mut acc,
                |a, (r2, rd)| {
                    a.0 += r2;
                    for (x, y) in a.1.iter_mut().zip(rd) {
                        *x += y;
                    }
                },
            )?;
            let m = o.m() as f64;
            cost += o.factor() * (acc.0 / m).sqrt();
            for i in 0..n {
                cost_d[i] += o.factor() * (acc.1[i] / m).sqrt();
            }
            evals += ((n + 1) * o.m()) as u64;
        }
        let grad = (0..n).map(|i| (cost_d[i] - cost) / deltas[i]).collect();
        Ok(GradResult {
            cost,
            grad: GradVector::new(self.names.clone(), grad),
            model_eval_count: evals,
            graph_traversal_count: evals,
        })
    }

    /// Stacked least-squares residuals `ρ` with
    /// `‖ρ‖² = Σ_k weight_k E_k² / scale_k²`.
    pub fn residuals(&self, p: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.m_total());
        for (k, o) in self.objectives.iter().enumerate() {
            let sim = self.simulate(k, p)?;
            let c = (o.weight / o.m() as f64).sqrt() / o.scale;
            out.extend((0..o.m()).map(|j| c * o.w[j] * (o.meas[j] - sim[j])));
        }
        Ok(out)
    }

    /// Rows `∂ sim_j / ∂p` for objective `k` together with the simulated
    /// values. AD seeds one backward pass per row.
    pub fn output_jacobian(&self, k: usize, p: &[f64], engine: Engine) -> Result<(Vec<f64>, DMatrix<f64>, u64)> {
        self.check(p)?;
        let o = &self.objectives[k];
        let n = self.names.len();
        let deltas = default_deltas(p);
        let mut slot = vec![None; n];
        for (l, &i) in o.index.iter().enumerate() {
            slot[i] = Some(l);
        }
        let mut rows: Vec<(f64, Vec<f64>)> = Vec::with_capacity(o.m());
        fold_points(
            self.exec,
            o.m(),
            Self::work(o, p),
            |w, j| {
                let out = o.graph.outputs()[0];
                o.graph.forward_into(&w.p, o.x(j), &mut w.tape)?;
                let sim = w.tape.value(out);
                let mut row = vec![0.0; n];
                match engine {
                    Engine::Ad => {
                        o.graph.backward_into(&mut w.tape, &[1.0], &mut w.adj)?;
                        for (l, &i) in o.index.iter().enumerate() {
                            row[i] = o.graph.param_adjoint(&w.adj, l);
                        }
                    }
                    Engine::Nd => {
                        for i in 0..n {
                            if let Some(l) = slot[i] {
                                w.p[l] = p[i] + deltas[i];
                            }
                            let res = o.graph.forward_into(&w.p, o.x(j), &mut w.tape);
                            if let Some(l) = slot[i] {
                                w.p[l] = p[i];
                            }
                            res?;
                            row[i] = (w.tape.value(out) - sim) / deltas[i];
                        }
                    }
                }
                Ok((sim, row))
            },
            &mut rows,
            |v, r| v.push(r),
        )?;
        let m = o.m();
        let sims = rows.iter().map(|r| r.0).collect();
        let jac = DMatrix::from_fn(m, n, |j, i| rows[j].1[i]);
        let count = match engine {
            Engine::Ad => 2 * m as u64,
            Engine::Nd => ((n + 1) * m) as u64,
        };
        Ok((sims, jac, count))
    }

    /// Residuals `ρ` and their Jacobian `∂ρ/∂p`, plus the evaluation count.
    pub fn residual_jacobian(&self, p: &[f64], engine: Engine) -> Result<(Vec<f64>, DMatrix<f64>, u64)> {
        let n = self.names.len();
        let mt = self.m_total();
        let mut rho = Vec::with_capacity(mt);
        let mut jac = DMatrix::zeros(mt, n);
        let mut count = 0;
        let mut row0 = 0;
        for (k, o) in self.objectives.iter().enumerate() {
            let (sim, jk, c) = self.output_jacobian(k, p, engine)?;
            let f = (o.weight / o.m() as f64).sqrt() / o.scale;
            for j in 0..o.m() {
                let s = f * o.w[j];
                rho.push(s * (o.meas[j] - sim[j]));
                for i in 0..n {
                    jac[(row0 + j, i)] = -s * jk[(j, i)];
                }
            }
            row0 += o.m();
            count += c;
        }
        Ok((rho, jac, count))
    }
}

/// `1e-6·|p|`, or `1e-6` where `p = 0`.
pub fn default_deltas(p: &[f64]) -> Vec<f64> {
    p.iter()
        .map(|v| if *v == 0.0 { 1e-6 } else { 1e-6 * v.abs() })
        .collect()
}

/// Cost and gradient of a single graph over a dataset by AD.
pub fn ad_gradient(g: &Graph, params: &IndexMap<String, f64>, dataset: &Dataset) -> Result<GradResult> {
    let pr = Problem::single(g, dataset)?;
    let p = pr.vector(params)?;
    pr.ad_gradient(&p)
}

/// Cost and gradient by forward differences with the given steps.
pub fn nd_gradient(
    g: &Graph,
    params: &IndexMap<String, f64>,
    deltas: &IndexMap<String, f64>,
    dataset: &Dataset,
) -> Result<GradResult> {
    let pr = Problem::single(g, dataset)?;
    let p = pr.vector(params)?;
    let d: Vec<f64> = pr
        .names()
        .iter()
        .map(|n| deltas.get(n).copied().ok_or_else(|| Error::ZeroStep(n.clone())))
        .collect::<Result<_>>()?;
    pr.nd_gradient(&p, &d)
}

/// `m × n` matrix of model-output derivatives, one row per bias point.
pub fn residual_jacobian(g: &Graph, params: &IndexMap<String, f64>, dataset: &Dataset) -> Result<DMatrix<f64>> {
    let pr = Problem::single(g, dataset)?;
    let p = pr.vector(params)?;
    Ok(pr.output_jacobian(0, &p, Engine::Ad)?.1)
}

/// Composite cost and AD gradient, using the scales stored in `spec`.
pub fn multi_objective_cost(spec: &CostSpec, params: &IndexMap<String, f64>) -> Result<(f64, GradVector)> {
    let pr = Problem::new(spec)?;
    let p = pr.vector(params)?;
    let r = pr.ad_gradient(&p)?;
    Ok((r.cost, r.grad))
}
