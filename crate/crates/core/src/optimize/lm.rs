use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Counts, FitReport, IterationRecord, LeastSquares, ParamSet, StopRule, Termination};
use crate::error::{Error, Result};
use crate::gradcalc::Engine;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmOptions {
    pub mu0: f64,
    /// Factor applied to `mu` after an accepted step.
    pub down: f64,
    /// Factor applied after a rejected step.
    pub up: f64,
    pub mu_max: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            mu0: 1e-3,
            down: 0.5,
            up: 2.0,
            mu_max: 1e12,
        }
    }
}

fn norm(r: &[f64]) -> f64 {
    r.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Solves `(A + mu diag(A)) d = -b` through the Jacobi-scaled system
/// `(S A S + mu I) y = -S b`, `d = S y`. `None` if the factorization fails.
fn damped_step(a: &DMatrix<f64>, b: &DVector<f64>, mu: f64) -> Option<DVector<f64>> {
    let n = a.nrows();
    let s = DVector::from_fn(n, |i, _| {
        let d = a[(i, i)];
        if d > 0.0 {
            1.0 / d.sqrt()
        } else {
            1.0
        }
    });
    let mut m = DMatrix::from_fn(n, n, |i, j| s[i] * a[(i, j)] * s[j]);
    for i in 0..n {
        m[(i, i)] += mu;
    }
    let rhs = -b.component_mul(&s);
    let y = m.cholesky()?.solve(&rhs);
    let d = y.component_mul(&s);
    d.iter().all(|v| v.is_finite()).then_some(d)
}

/// Levenberg-Marquardt on `‖ρ(p)‖`. Each iteration builds `J`, then tries
/// damped steps until one lowers the cost (`mu *= down`) or `mu` passes
/// `mu_max` (`mu *= up` per rejection). A trial point outside the model's
/// domain counts as a rejection. One record per accepted step, after an
/// initial record at iteration 0.
pub fn levenberg_marquardt<L: LeastSquares + ?Sized>(
    problem: &L,
    init: &ParamSet,
    stop: &StopRule,
    engine: Engine,
    opts: &LmOptions,
) -> Result<FitReport> {
    let names = problem.names().to_vec();
    let r = init.resolve(&names)?;
    let m_eval = |c: &mut Counts, n: usize| {
        c.model_evals += n as u64;
        c.graph_traversals += n as u64;
    };
    let mut p = r.p.clone();
    let mut counts = Counts::default();
    let mut records = Vec::new();
    let mut elapsed = 0.0;
    let mut mu = opts.mu0;
    let mut updates = 0;
    let mut terminated = Termination::MaxIter;
    let mut error = None;

    let t0 = Instant::now();
    let first = problem.residual_jacobian(&p, engine);
    elapsed += t0.elapsed().as_secs_f64();
    let (mut rho, mut jac) = match first {
        Ok((rho, jac, c)) => {
            counts += c;
            (rho, jac)
        }
        Err(e) => {
            return Ok(FitReport {
                optimizer: "levenberg-marquardt".into(),
                engine,
                iterations: records,
                final_params: names.into_iter().zip(p).collect(),
                final_cost: f64::NAN,
                terminated_by: Termination::Error,
                error: Some(e.to_string()),
                updates: 0,
                elapsed_seconds: elapsed,
            });
        }
    };
    let mut cost = norm(&rho);
    let record = |records: &mut Vec<IterationRecord>, iter, cost, elapsed, c: Counts| {
        records.push(IterationRecord {
            iter,
            cost,
            elapsed_seconds: elapsed,
            model_evals: c.model_evals,
            graph_traversals: c.graph_traversals,
        })
    };
    record(&mut records, 0, cost, elapsed, counts);

    'outer: loop {
        if cost <= stop.e_target {
            terminated = Termination::TargetReached;
            break;
        }
        if updates >= stop.n_max {
            break;
        }
        let t0 = Instant::now();
        let a = jac.transpose() * &jac;
        let b = jac.transpose() * DVector::from_column_slice(&rho);
        let mut factored = false;
        loop {
            if mu > opts.mu_max {
                elapsed += t0.elapsed().as_secs_f64();
                if factored {
                    terminated = Termination::Converged;
                } else {
                    terminated = Termination::Error;
                    error = Some(Error::Singular.to_string());
                }
                break 'outer;
            }
            let Some(d) = damped_step(&a, &b, mu) else {
                mu *= opts.up;
                continue;
            };
            factored = true;
            let mut trial: Vec<f64> = p.iter().zip(d.iter()).map(|(x, y)| x + y).collect();
            r.project(&mut trial);
            m_eval(&mut counts, rho.len());
            let trial_cost = match problem.residuals(&trial) {
                Ok(rr) => norm(&rr),
                Err(_) => f64::INFINITY,
            };
            if trial_cost < cost {
                p = trial;
                mu *= opts.down;
                break;
            }
            mu *= opts.up;
        }
        match problem.residual_jacobian(&p, engine) {
            Ok((rr, jj, c)) => {
                counts += c;
                rho = rr;
                jac = jj;
            }
            Err(e) => {
                elapsed += t0.elapsed().as_secs_f64();
                terminated = Termination::Error;
                error = Some(e.to_string());
                updates += 1;
                cost = f64::NAN;
                break;
            }
        }
        elapsed += t0.elapsed().as_secs_f64();
        updates += 1;
        cost = norm(&rho);
        record(&mut records, updates, cost, elapsed, counts);
    }

    let final_cost = if cost.is_finite() {
        cost
    } else {
        problem.residuals(&p).map(|r| norm(&r)).unwrap_or(f64::NAN)
    };
    Ok(FitReport {
        optimizer: "levenberg-marquardt".into(),
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
