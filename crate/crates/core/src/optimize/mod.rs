//! Gradient descent (plain or AdaGrad) and Levenberg-Marquardt.

mod adagrad;
mod lm;

use std::time::Instant;

use indexmap::IndexMap;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcalc::{Engine, GradResult, Problem};

pub use adagrad::{adagrad_step, AdaGradState};
pub use lm::{levenberg_marquardt, LmOptions};

/// Something with a scalar cost and a gradient over a named parameter vector.
pub trait CostFunction {
    fn names(&self) -> &[String];
    fn cost(&self, p: &[f64]) -> Result<f64>;
    fn gradient(&self, p: &[f64], engine: Engine) -> Result<GradResult>;
}

/// Cost of the form `‖ρ(p)‖`.
pub trait LeastSquares: CostFunction {
    /// `ρ`, `∂ρ/∂p` and the model evaluation count for that call.
    fn residual_jacobian(&self, p: &[f64], engine: Engine) -> Result<(Vec<f64>, DMatrix<f64>, Counts)>;
    fn residuals(&self, p: &[f64]) -> Result<Vec<f64>>;
}

/// Model evaluations and graph traversals spent by one call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub model_evals: u64,
    pub graph_traversals: u64,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        self.model_evals += o.model_evals;
        self.graph_traversals += o.graph_traversals;
    }
}

impl CostFunction for Problem {
    fn names(&self) -> &[String] {
        Problem::names(self)
    }

    fn cost(&self, p: &[f64]) -> Result<f64> {
        Problem::cost(self, p)
    }

    fn gradient(&self, p: &[f64], engine: Engine) -> Result<GradResult> {
        Problem::gradient(self, p, engine)
    }
}

impl LeastSquares for Problem {
    fn residual_jacobian(&self, p: &[f64], engine: Engine) -> Result<(Vec<f64>, DMatrix<f64>, Counts)> {
        let (r, j, c) = Problem::residual_jacobian(self, p, engine)?;
        let m = self.m_total() as u64;
        let counts = match engine {
            Engine::Ad => Counts {
                model_evals: m,
                graph_traversals: c,
            },
            Engine::Nd => Counts {
                model_evals: c,
                graph_traversals: c,
            },
        };
        Ok((r, j, counts))
    }

    fn residuals(&self, p: &[f64]) -> Result<Vec<f64>> {
        Problem::residuals(self, p)
    }
}

/// Starting point of a fit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamSet {
    pub values: IndexMap<String, f64>,
    /// Per-parameter update rate.
    pub eta: IndexMap<String, f64>,
    pub bounds: Option<IndexMap<String, (f64, f64)>>,
}

impl ParamSet {
    /// `eta = |p|/100` (1e-6 for a zero value), no bounds.
    pub fn new(values: IndexMap<String, f64>) -> Self {
        let eta = values
            .iter()
            .map(|(k, v)| (k.clone(), if *v == 0.0 { 1e-6 } else { v.abs() / 100.0 }))
            .collect();
        ParamSet {
            values,
            eta,
            bounds: None,
        }
    }

    pub fn with_bounds(mut self, bounds: IndexMap<String, (f64, f64)>) -> Self {
        self.bounds = Some(bounds);
        self
    }

    /// Same rate for every parameter.
    pub fn with_uniform_eta(mut self, eta: f64) -> Self {
        for v in self.eta.values_mut() {
            *v = eta;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in &self.values {
            if !v.is_finite() {
                return Err(Error::InvalidParam {
                    name: k.clone(),
                    detail: "not finite".into(),
                });
            }
            match self.eta.get(k) {
                Some(e) if *e > 0.0 && e.is_finite() => {}
                _ => {
                    return Err(Error::InvalidParam {
                        name: k.clone(),
                        detail: "update rate must be > 0".into(),
                    })
                }
            }
            if let Some((lo, hi)) = self.bounds.as_ref().and_then(|b| b.get(k)) {
                if v < lo || v > hi {
                    return Err(Error::InvalidParam {
                        name: k.clone(),
                        detail: format!("{v:e} outside bounds [{lo:e}, {hi:e}]"),
                    });
                }
            }
        }
        Ok(())
    }

    /// Values, rates and bounds ordered like `names`.
    fn resolve(&self, names: &[String]) -> Result<Resolved> {
        self.validate()?;
        let mut r = Resolved {
            p: Vec::with_capacity(names.len()),
            eta: Vec::with_capacity(names.len()),
            lo: vec![f64::NEG_INFINITY; names.len()],
            hi: vec![f64::INFINITY; names.len()],
        };
        for (i, n) in names.iter().enumerate() {
            r.p.push(*self.values.get(n).ok_or_else(|| Error::MissingParam(n.clone()))?);
            r.eta.push(self.eta[n]);
            if let Some((lo, hi)) = self.bounds.as_ref().and_then(|b| b.get(n)) {
                r.lo[i] = *lo;
                r.hi[i] = *hi;
            }
        }
        if let Some(extra) = self.values.keys().find(|k| !names.contains(k)) {
            return Err(Error::UnknownParam(extra.clone()));
        }
        Ok(r)
    }
}

struct Resolved {
    p: Vec<f64>,
    eta: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Resolved {
    fn project(&self, p: &mut [f64]) {
        for (i, v) in p.iter_mut().enumerate() {
            *v = v.clamp(self.lo[i], self.hi[i]);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub n_max: usize,
    pub e_target: f64,
}

impl StopRule {
    pub fn new(n_max: usize, e_target: f64) -> Self {
        StopRule { n_max, e_target }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    MaxIter,
    TargetReached,
    /// LM found no decreasing step before the damping cap.
    Converged,
    Error,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Number of parameter updates applied before `cost` was measured.
    pub iter: usize,
    pub cost: f64,
    /// Cumulative time spent in gradient and update work.
    pub elapsed_seconds: f64,
    /// Cumulative counts.
    pub model_evals: u64,
    pub graph_traversals: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitReport {
    pub optimizer: String,
    pub engine: Engine,
    pub iterations: Vec<IterationRecord>,
    pub final_params: IndexMap<String, f64>,
    pub final_cost: f64,
    pub terminated_by: Termination,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Parameter updates applied (accepted steps for LM).
    pub updates: usize,
    pub elapsed_seconds: f64,
}

impl FitReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Two columns, `elapsed_seconds,rmse`, one row per record.
    pub fn convergence_csv(&self) -> String {
        let mut s = String::from("elapsed_seconds,rmse\n");
        for r in &self.iterations {
            s.push_str(&format!("{:.9e},{:.16e}\n", r.elapsed_seconds, r.cost));
        }
        s
    }

    pub fn cost_trace(&self) -> Vec<f64> {
        self.iterations.iter().map(|r| r.cost).collect()
    }

    /// First update count at which the cost was at or below `target`.
    pub fn iterations_to_reach(&self, target: f64) -> Option<usize> {
        self.iterations
            .iter()
            .find(|r| r.cost <= target)
            .map(|r| r.iter)
            .or((self.final_cost <= target).then_some(self.updates))
    }

    pub fn total_counts(&self) -> Counts {
        self.iterations
            .last()
            .map(|r| Counts {
                model_evals: r.model_evals,
                graph_traversals: r.graph_traversals,
            })
            .unwrap_or_default()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// `p -= eta * g`.
    Plain,
    /// `h += g²; p -= eta * g / (sqrt(h) + eps)`. Coordinates with `h = 0`
    /// are left alone.
    AdaGrad { eps: f64 },
}

impl Default for StepRule {
    fn default() -> Self {
        StepRule::AdaGrad { eps: 0.0 }
    }
}

/// Gradient descent with the default AdaGrad step.
pub fn gradient_descent<C: CostFunction + ?Sized>(
    problem: &C,
    init: &ParamSet,
    stop: &StopRule,
    engine: Engine,
) -> Result<FitReport> {
    gradient_descent_with(problem, init, stop, engine, StepRule::default())
}

/// Evaluates the gradient, stops if the cost is at target, otherwise updates
/// and projects onto the bounds. Runs at most `n_max` gradient evaluations.
/// An engine error ends the run with `terminated_by = error`; the trace up
/// to that point is kept.
pub fn gradient_descent_with<C: CostFunction + ?Sized>(
    problem: &C,
    init: &ParamSet,
    stop: &StopRule,
    engine: Engine,
    step: StepRule,
) -> Result<FitReport> {
    let names = problem.names().to_vec();
    let r = init.resolve(&names)?;
    let mut p = r.p.clone();
    let mut state = AdaGradState::new(names.len());
    let mut records = Vec::new();
    let mut counts = Counts::default();
    let mut elapsed = 0.0;
    let mut terminated = Termination::MaxIter;
    let mut error = None;
    let mut updates = 0;

    for it in 0..stop.n_max {
        let t0 = Instant::now();
        let g = match problem.gradient(&p, engine) {
            Ok(g) => g,
            Err(e) => {
                terminated = Termination::Error;
                error = Some(e.to_string());
                break;
            }
        };
        counts += Counts {
            model_evals: g.model_eval_count,
            graph_traversals: g.graph_traversal_count,
        };
        let done = g.cost <= stop.e_target;
        if !done {
            match step {
                StepRule::Plain => {
                    for (i, gi) in g.grad.values().iter().enumerate() {
                        p[i] -= r.eta[i] * gi;
                    }
                }
                StepRule::AdaGrad { eps } => adagrad_step(&mut state, &mut p, &r.eta, g.grad.values(), eps),
            }
            r.project(&mut p);
            updates += 1;
        }
        elapsed += t0.elapsed().as_secs_f64();
        records.push(IterationRecord {
            iter: it,
            cost: g.cost,
            elapsed_seconds: elapsed,
            model_evals: counts.model_evals,
            graph_traversals: counts.graph_traversals,
        });
        if done {
            terminated = Termination::TargetReached;
            break;
        }
    }

    let final_cost = match terminated {
        Termination::TargetReached => records.last().map(|r| r.cost).unwrap_or(f64::NAN),
        _ => match problem.cost(&p) {
            Ok(c) => c,
            Err(e) => {
                if error.is_none() {
                    terminated = Termination::Error;
                    error = Some(e.to_string());
                }
                f64::NAN
            }
        },
    };
    let optimizer = match step {
        StepRule::Plain => "gradient-descent",
        StepRule::AdaGrad { .. } => "adagrad",
    };
    Ok(FitReport {
        optimizer: optimizer.into(),
        engine,
        iterations: records,
        final_params: names.into_iter().zip(p).collect(),
        final_cost,
        terminated_by: terminated,
        error,
        updates,
        elapsed_seconds: elapsed,
    })
}
