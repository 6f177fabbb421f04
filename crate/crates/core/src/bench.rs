//! Wall-clock comparison of the AD and ND gradient engines.

use std::time::Instant;

use indexmap::IndexMap;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::gradcalc::{Engine, Problem};
use crate::models::{self, PhysicalConstants};
use crate::optimize::{gradient_descent, levenberg_marquardt, FitReport, LmOptions, ParamSet, StopRule};

pub const MIN_REPETITIONS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchResult {
    pub engine: Engine,
    pub model: String,
    pub n_params: usize,
    pub m_points: usize,
    /// Median over `repetitions`.
    pub wall_seconds_per_gradient: f64,
    pub repetitions: usize,
    /// `t_ND / t_AD`; AD rows only.
    pub speedup_vs_nd: Option<f64>,
    pub model_eval_count: u64,
    pub graph_traversal_count: u64,
}

pub const CSV_HEADER: &str = "engine,model,n_params,m_points,wall_seconds_per_gradient,repetitions,speedup_vs_nd,model_eval_count,graph_traversal_count";

impl BenchResult {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.9e},{},{},{},{}",
            self.engine,
            self.model,
            self.n_params,
            self.m_points,
            self.wall_seconds_per_gradient,
            self.repetitions,
            self.speedup_vs_nd.map(|s| format!("{s:.4}")).unwrap_or_default(),
            self.model_eval_count,
            self.graph_traversal_count
        )
    }
}

pub fn to_csv(rows: &[BenchResult]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn single_problem(model: &str, dataset: &Dataset) -> Result<Problem> {
    let info = models::model_info(model)?;
    if info.kinds.len() != 1 {
        return Err(Error::Config(format!(
            "bench takes a single-characteristic model, `{model}` has {}",
            info.kinds.len()
        )));
    }
    let m = models::build_model(model, &PhysicalConstants::default())?;
    let g = m
        .graph(dataset.kind)
        .ok_or_else(|| Error::Config(format!("model `{model}` has no `{}` characteristic", dataset.kind)))?;
    Ok(Problem::single(g, dataset)?.with_exec(Exec::Sequential))
}

/// Median time per full-dataset gradient for `[AD, ND]`, on one thread,
/// after a discarded warm-up call. The two engines alternate within each
/// repetition.
pub fn bench_problem(model: &str, problem: &Problem, p: &[f64], repetitions: usize) -> Result<[BenchResult; 2]> {
    if repetitions < MIN_REPETITIONS {
        return Err(Error::Config(format!("repetitions must be >= {MIN_REPETITIONS}")));
    }
    assert_eq!(problem.exec().effective(), Exec::Sequential, "bench runs on one thread");
    let engines = [Engine::Ad, Engine::Nd];
    let mut times = [Vec::new(), Vec::new()];
    let mut counts = [(0, 0); 2];
    for (k, e) in engines.iter().enumerate() {
        let r = problem.gradient(p, *e)?;
        counts[k] = (r.model_eval_count, r.graph_traversal_count);
    }
    for _ in 0..repetitions {
        for (k, e) in engines.iter().enumerate() {
            let t = Instant::now();
            let r = problem.gradient(p, *e)?;
            times[k].push(t.elapsed().as_secs_f64());
            std::hint::black_box(r);
        }
    }
    let t_ad = median(&mut times[0]);
    let t_nd = median(&mut times[1]);
    let row = |k: usize, t: f64, speedup| BenchResult {
        engine: engines[k],
        model: model.to_string(),
        n_params: problem.n_params(),
        m_points: problem.m_total(),
        wall_seconds_per_gradient: t,
        repetitions,
        speedup_vs_nd: speedup,
        model_eval_count: counts[k].0,
        graph_traversal_count: counts[k].1,
    };
    Ok([row(0, t_ad, Some(t_nd / t_ad)), row(1, t_nd, None)])
}

/// [`bench_problem`] for a registered single-characteristic model.
pub fn bench_gradient(
    model: &str,
    params: &IndexMap<String, f64>,
    dataset: &Dataset,
    repetitions: usize,
) -> Result<[BenchResult; 2]> {
    models::model_info(model)?.validate(params)?;
    let pr = single_problem(model, dataset)?;
    let p = pr.vector(params)?;
    bench_problem(model, &pr, &p, repetitions)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    GdAdaGrad,
    Lm,
}

/// The same fit run with AD and with ND, both on one thread.
pub fn bench_extraction(
    model: &str,
    optimizer: Optimizer,
    init: &ParamSet,
    dataset: &Dataset,
    stop: &StopRule,
) -> Result<(FitReport, FitReport)> {
    let pr = single_problem(model, dataset)?;
    let run = |e| match optimizer {
        Optimizer::GdAdaGrad => gradient_descent(&pr, init, stop, e),
        Optimizer::Lm => levenberg_marquardt(&pr, init, stop, e, &LmOptions::default()),
    };
    Ok((run(Engine::Ad)?, run(Engine::Nd)?))
}
