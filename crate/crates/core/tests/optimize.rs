use indexmap::IndexMap;
use mosfit_core::data::{self, SweepSpec};
use mosfit_core::gradcalc::{Engine, GradResult, Problem};
use mosfit_core::graph::GradVector;
use mosfit_core::models::{self, PhysicalConstants};
use mosfit_core::optimize::{
    adagrad_step, gradient_descent, gradient_descent_with, levenberg_marquardt, AdaGradState, CostFunction, Counts,
    LeastSquares, LmOptions, ParamSet, StepRule, StopRule, Termination,
};
use mosfit_core::{Error, Result};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// `(x - 3)²`; the gradient fails beyond `wall`.
struct Quad {
    names: Vec<String>,
    wall: f64,
}

impl Quad {
    fn new() -> Self {
        Quad {
            names: vec!["x".into()],
            wall: f64::INFINITY,
        }
    }
}

impl CostFunction for Quad {
    fn names(&self) -> &[String] {
        &self.names
    }

    fn cost(&self, p: &[f64]) -> Result<f64> {
        Ok((p[0] - 3.0).powi(2))
    }

    fn gradient(&self, p: &[f64], _: Engine) -> Result<GradResult> {
        if p[0] > self.wall {
            return Err(Error::Config("past the wall".into()));
        }
        Ok(GradResult {
            cost: (p[0] - 3.0).powi(2),
            grad: GradVector::new(self.names.clone(), vec![2.0 * (p[0] - 3.0)]),
            model_eval_count: 1,
            graph_traversal_count: 2,
        })
    }
}

/// `‖A p - b‖`.
struct Linear {
    names: Vec<String>,
    a: DMatrix<f64>,
    b: DVector<f64>,
}

impl Linear {
    fn rho(&self, p: &[f64]) -> DVector<f64> {
        &self.a * DVector::from_column_slice(p) - &self.b
    }
}

impl CostFunction for Linear {
    fn names(&self) -> &[String] {
        &self.names
    }

    fn cost(&self, p: &[f64]) -> Result<f64> {
        Ok(self.rho(p).norm())
    }

    fn gradient(&self, p: &[f64], _: Engine) -> Result<GradResult> {
        let r = self.rho(p);
        let g = self.a.transpose() * &r / r.norm();
        Ok(GradResult {
            cost: r.norm(),
            grad: GradVector::new(self.names.clone(), g.iter().copied().collect()),
            model_eval_count: 0,
            graph_traversal_count: 0,
        })
    }
}

impl LeastSquares for Linear {
    fn residual_jacobian(&self, p: &[f64], _: Engine) -> Result<(Vec<f64>, DMatrix<f64>, Counts)> {
        Ok((self.rho(p).iter().copied().collect(), self.a.clone(), Counts::default()))
    }

    fn residuals(&self, p: &[f64]) -> Result<Vec<f64>> {
        Ok(self.rho(p).iter().copied().collect())
    }
}

fn x0(v: f64) -> ParamSet {
    let mut m = IndexMap::new();
    m.insert("x".to_string(), v);
    ParamSet::new(m)
}

#[test]
fn plain_gd_solves_quadratic() {
    let init = x0(0.0).with_uniform_eta(0.4);
    let r = gradient_descent_with(&Quad::new(), &init, &StopRule::new(50, 1e-12), Engine::Ad, StepRule::Plain).unwrap();
    assert_eq!(r.terminated_by, Termination::TargetReached);
    assert!(r.updates <= 50);
    assert!((r.final_params["x"] - 3.0).abs() <= 1e-6);
    assert_eq!(r.optimizer, "gradient-descent");
    // each step shrinks the error by |1 - 0.8|
    let t = r.cost_trace();
    for w in t.windows(2) {
        assert!((w[1] / w[0] - 0.04).abs() < 1e-9);
    }
}

#[test]
fn zero_gradient_leaves_params() {
    for step in [StepRule::Plain, StepRule::default()] {
        let r = gradient_descent_with(&Quad::new(), &x0(3.0), &StopRule::new(5, -1.0), Engine::Ad, step).unwrap();
        assert_eq!(r.final_params["x"], 3.0);
        assert_eq!(r.updates, 5);
        assert_eq!(r.terminated_by, Termination::MaxIter);
    }
}

#[test]
fn adagrad_first_step() {
    let mut s = AdaGradState::new(1);
    let mut p = [0.0];
    adagrad_step(&mut s, &mut p, &[0.1], &[1.0], 0.0);
    assert_eq!(s.h, vec![1.0]);
    assert_eq!(p, [-0.1]);
    // h = 0 coordinates are skipped
    let mut s = AdaGradState::new(2);
    let mut p = [1.0, 1.0];
    adagrad_step(&mut s, &mut p, &[0.1, 0.1], &[0.0, 2.0], 0.0);
    assert_eq!(p, [1.0, 0.9]);
}

#[test]
fn adagrad_steps_shrink_like_inverse_sqrt() {
    let mut s = AdaGradState::new(1);
    let mut p = [0.0];
    let mut prev = 0.0;
    for t in 1..=100 {
        adagrad_step(&mut s, &mut p, &[1.0], &[2.0], 0.0);
        let step = prev - p[0];
        assert!((step - 1.0 / (t as f64).sqrt()).abs() < 1e-12, "t={t}");
        prev = p[0];
    }
}

#[test]
fn bounds_are_enforced() {
    let mut b = IndexMap::new();
    b.insert("x".to_string(), (0.0, 2.0));
    let init = x0(0.5).with_uniform_eta(0.4).with_bounds(b.clone());
    let r = gradient_descent_with(&Quad::new(), &init, &StopRule::new(40, 0.0), Engine::Ad, StepRule::Plain).unwrap();
    assert_eq!(r.final_params["x"], 2.0);
    // a start outside the box is rejected up front
    let bad = x0(5.0).with_bounds(b);
    assert!(matches!(
        gradient_descent(&Quad::new(), &bad, &StopRule::new(5, 0.0), Engine::Ad),
        Err(Error::InvalidParam { .. })
    ));
}

#[test]
fn stop_rules() {
    let q = Quad::new();
    let r = gradient_descent(&q, &x0(0.0), &StopRule::new(0, 0.0), Engine::Ad).unwrap();
    assert!(r.iterations.is_empty());
    assert_eq!(r.terminated_by, Termination::MaxIter);
    assert_eq!(r.final_cost, 9.0);

    let r = gradient_descent(&q, &x0(0.0), &StopRule::new(7, 0.0), Engine::Ad).unwrap();
    assert_eq!(r.iterations.len(), 7);
    assert_eq!(r.updates, 7);
    assert_eq!(r.total_counts(), Counts { model_evals: 7, graph_traversals: 14 });

    let init = x0(0.0).with_uniform_eta(0.4);
    let r = gradient_descent_with(&q, &init, &StopRule::new(100, 1e-4), Engine::Ad, StepRule::Plain).unwrap();
    let t = r.cost_trace();
    assert!(*t.last().unwrap() <= 1e-4);
    assert!(t[..t.len() - 1].iter().all(|c| *c > 1e-4));
    assert_eq!(r.updates, t.len() - 1);
    assert_eq!(r.iterations_to_reach(1e-4), Some(t.len() - 1));
}

#[test]
fn engine_error_keeps_trace() {
    let q = Quad { names: vec!["x".into()], wall: 1.0 };
    let init = x0(0.0).with_uniform_eta(0.4);
    let r = gradient_descent_with(&q, &init, &StopRule::new(50, 0.0), Engine::Ad, StepRule::Plain).unwrap();
    assert_eq!(r.terminated_by, Termination::Error);
    assert!(r.error.as_deref().unwrap().contains("wall"));
    // 0 -> 2.4 crosses the wall after one update
    assert_eq!(r.iterations.len(), 1);
    assert!((r.final_params["x"] - 2.4).abs() < 1e-12);
}

#[test]
fn param_set_defaults() {
    let mut m = IndexMap::new();
    m.insert("a".to_string(), -250.0);
    m.insert("b".to_string(), 0.0);
    let ps = ParamSet::new(m.clone());
    assert_eq!(ps.eta["a"], 2.5);
    assert_eq!(ps.eta["b"], 1e-6);
    assert!(ps.validate().is_ok());
    m.insert("c".to_string(), f64::INFINITY);
    assert!(ParamSet::new(m).validate().is_err());
    // names must match the problem
    let mut m = IndexMap::new();
    m.insert("x".to_string(), 1.0);
    m.insert("y".to_string(), 1.0);
    assert!(matches!(
        gradient_descent(&Quad::new(), &ParamSet::new(m), &StopRule::new(1, 0.0), Engine::Ad),
        Err(Error::UnknownParam(n)) if n == "y"
    ));
}

fn linear() -> Linear {
    Linear {
        names: vec!["a".into(), "b".into(), "c".into()],
        a: DMatrix::from_row_slice(5, 3, &[
            1.0, 0.0, 2.0, //
            0.5, 1.0, 0.0, //
            0.0, 3.0, 1.0, //
            1.0, 1.0, 1.0, //
            2.0, -1.0, 0.5,
        ]),
        b: DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0]),
    }
}

#[test]
fn lm_solves_linear_least_squares() {
    let l = linear();
    let exact = l.a.clone().svd(true, true).solve(&l.b, 1e-14).unwrap();
    let best = (&l.a * &exact - &l.b).norm();
    let mut m = IndexMap::new();
    for n in ["a", "b", "c"] {
        m.insert(n.to_string(), 1.0);
    }
    let opts = LmOptions { mu0: 1e-12, ..LmOptions::default() };
    let r = levenberg_marquardt(&l, &ParamSet::new(m), &StopRule::new(5, 0.0), Engine::Ad, &opts).unwrap();
    assert_eq!(r.iterations[0].iter, 0);
    assert!((r.iterations[1].cost - best).abs() <= 1e-9 * best);
    for (i, n) in ["a", "b", "c"].iter().enumerate() {
        assert!((r.final_params[*n] - exact[i]).abs() <= 1e-8);
    }
    assert_eq!(r.optimizer, "levenberg-marquardt");
}

#[test]
fn lm_is_monotone_on_npl() {
    let c = PhysicalConstants::default();
    let truth = models::nth_power_reference();
    let d = data::synth("nth-power-law", &truth, &SweepSpec::standard(), 0.01, 1).unwrap();
    let g = models::build_nth_power_law(&c).unwrap();
    let pr = Problem::single(&g, &d).unwrap();
    let init: IndexMap<String, f64> = truth.iter().map(|(k, v)| (k.clone(), v * 1.1)).collect();
    let r = levenberg_marquardt(&pr, &ParamSet::new(init), &StopRule::new(30, 0.0), Engine::Ad, &LmOptions::default())
        .unwrap();
    let t = r.cost_trace();
    assert_eq!(t.len(), r.updates + 1);
    for w in t.windows(2) {
        assert!(w[1] < w[0]);
    }
    assert!(r.final_cost < 0.1 * t[0]);
    let counts: Vec<u64> = r.iterations.iter().map(|i| i.model_evals).collect();
    assert!(counts.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn report_serialization() {
    let r = gradient_descent(&Quad::new(), &x0(0.0), &StopRule::new(3, 0.0), Engine::Nd).unwrap();
    let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    assert_eq!(v["engine"], "nd");
    assert_eq!(v["terminated_by"], "max_iter");
    assert_eq!(v["iterations"].as_array().unwrap().len(), 3);
    assert!(v.get("error").is_none());
    let csv = r.convergence_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("elapsed_seconds,rmse"));
    assert_eq!(lines.count(), 3);
}

proptest! {
    #[test]
    fn plain_gd_converges_for_stable_rates(x in -50.0f64..50.0, eta in 0.05f64..0.95) {
        let init = x0(x).with_uniform_eta(eta);
        let r = gradient_descent_with(&Quad::new(), &init, &StopRule::new(2000, 1e-14), Engine::Ad, StepRule::Plain).unwrap();
        prop_assert!((r.final_params["x"] - 3.0).abs() <= 1e-6);
    }

    #[test]
    fn lm_never_increases_cost(start in proptest::collection::vec(-10.0f64..10.0, 3)) {
        let l = linear();
        let m: IndexMap<String, f64> = ["a", "b", "c"].iter().map(|n| n.to_string()).zip(start).collect();
        let r = levenberg_marquardt(&l, &ParamSet::new(m), &StopRule::new(10, 0.0), Engine::Ad, &LmOptions::default()).unwrap();
        let t = r.cost_trace();
        for w in t.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
    }
}
