use indexmap::IndexMap;
use mosfit_core::data::DatasetKind;
use mosfit_core::graph::Graph;
use mosfit_core::models::{self, surface, PhysicalConstants};
use mosfit_core::Error;
use proptest::prelude::*;

fn c() -> PhysicalConstants {
    PhysicalConstants::default()
}

fn eval(g: &Graph, params: &IndexMap<String, f64>, vgs: f64, vds: f64) -> f64 {
    let p = g.bind_params(params).unwrap();
    let x = g.bind_inputs(&[("Vgs", vgs), ("Vds", vds)]).unwrap();
    g.forward(&p, &x).unwrap().0[0]
}

fn npl_oracle(p: &IndexMap<String, f64>, vgs: f64, vds: f64) -> f64 {
    let ov = vgs - p["VTH"];
    if ov <= 0.0 {
        return 0.0;
    }
    let vdsat = p["J"] * ov.powf(p["M"]);
    let idsat = p["K"] * ov.powf(p["N"]);
    let d = p["DELTA"];
    let vmod = vds / (1.0 + (vds / vdsat).powf(d)).powf(1.0 / d);
    let s = vmod / vdsat;
    idsat * (2.0 - s) * s * (1.0 + p["LAMBDA"] * vds) * (1.0 + p["THETA"] * ov)
}

#[test]
fn registry_lists_models() {
    assert_eq!(
        models::model_names(),
        vec!["nth-power-law", "sp-current", "sp-cds", "sp-cgd", "sp-multi"]
    );
    let n: Vec<usize> = models::registry().iter().map(|m| m.params.len()).collect();
    assert_eq!(n, vec![8, 8, 3, 5, 13]);
    match models::model_info("bsim") {
        Err(Error::UnknownModel { known, .. }) => assert!(known.contains("sp-multi")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn validate_reports_problems() {
    let info = models::model_info("nth-power-law").unwrap();
    let mut p = models::nth_power_reference();
    assert!(info.validate(&p).is_ok());
    p.shift_remove("N");
    assert!(matches!(info.validate(&p), Err(Error::MissingParam(n)) if n == "N"));
    p.insert("N".into(), f64::NAN);
    assert!(matches!(info.validate(&p), Err(Error::InvalidParam { .. })));
    p.insert("N".into(), 3.0);
    p.insert("BOGUS".into(), 1.0);
    assert!(matches!(info.validate(&p), Err(Error::UnknownParam(n)) if n == "BOGUS"));
}

#[test]
fn reference_params_cover_every_model() {
    for m in models::registry() {
        let p = models::reference_params(m.name, &c()).unwrap();
        m.validate(&p).unwrap();
        let model = models::build_model(m.name, &c()).unwrap();
        assert_eq!(model.objectives.len(), m.kinds.len());
        for (_, g) in &model.objectives {
            g.bind_params(&p).unwrap();
        }
    }
}

#[test]
fn npl_matches_closed_form() {
    let g = models::build_nth_power_law(&c()).unwrap();
    let p = models::nth_power_reference();
    for vgs in [2.0, 2.6, 3.0, 6.0, 10.0, 14.0] {
        for vds in [0.0, 0.1, 1.0, 2.0, 10.0, 50.0] {
            let got = eval(&g, &p, vgs, vds);
            let want = npl_oracle(&p, vgs, vds);
            assert!(
                (got - want).abs() <= 1e-12 * want.abs().max(1e-30),
                "vgs {vgs} vds {vds}: {got} vs {want}"
            );
        }
    }
}

/// Charge balance residual, decreasing in `phi` on `(0, a)`.
fn balance(phi: f64, a: f64, gb2: f64, phi_f: f64, pt: f64) -> f64 {
    let x = phi / pt;
    let shift = (2.0 * phi_f + pt) / pt;
    let f = (-x).exp() + x - 1.0 + (-shift).exp() * (x.exp() - x - 1.0);
    (a - phi).powi(2) - gb2 * pt * f
}

fn bisect_phi(vg: f64, pf: f64, tox: f64, na: f64, vfb: f64) -> f64 {
    let c = c();
    let cox = c.eps_ox / tox;
    let gamma2 = 2.0 * c.eps_sic * c.k * c.t * na * 1e6;
    let gb2 = gamma2 / (cox * cox * c.phi_t);
    let a = vg - vfb;
    let (mut lo, mut hi) = (1e-300, a);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if balance(mid, a, gb2, pf, c.phi_t) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn surface_potential_matches_bisection() {
    let g = surface::build_surface_potential(&c()).unwrap();
    let p = models::sp_current_reference();
    let params: IndexMap<String, f64> = ["TOX", "NA", "VFBC"]
        .iter()
        .map(|n| (n.to_string(), p[*n]))
        .collect();
    let pv = g.bind_params(&params).unwrap();
    for vg in [-1.0, 0.0, 2.0, 6.0, 14.0] {
        for pf in [0.0, 0.5, 5.0, 20.0] {
            let x = g.bind_inputs(&[("Vgs", vg), ("PhiF", pf)]).unwrap();
            let got = g.forward(&pv, &x).unwrap().0[0];
            let want = bisect_phi(vg, pf, p["TOX"], p["NA"], p["VFBC"]);
            assert!((got - want).abs() <= 1e-9 * want.max(1.0), "vg {vg} pf {pf}: {got} vs {want}");
        }
    }
}

#[test]
fn surface_potential_below_floor_is_linear() {
    let g = surface::build_surface_potential(&c()).unwrap();
    let p = models::sp_current_reference();
    let params: IndexMap<String, f64> = ["TOX", "NA", "VFBC"]
        .iter()
        .map(|n| (n.to_string(), p[*n]))
        .collect();
    let pv = g.bind_params(&params).unwrap();
    let phi = |a: f64| {
        let x = g.bind_inputs(&[("Vgs", p["VFBC"] + a), ("PhiF", 0.0)]).unwrap();
        g.forward(&pv, &x).unwrap().0[0]
    };
    let at_floor = bisect_phi(p["VFBC"] + surface::OVERDRIVE_FLOOR, 0.0, p["TOX"], p["NA"], p["VFBC"]);
    for a in [-0.5, 0.0, 0.004] {
        let want = at_floor * a / surface::OVERDRIVE_FLOOR;
        assert!((phi(a) - want).abs() <= 1e-9 * at_floor);
    }
}

#[test]
fn cds_matches_closed_form() {
    let cc = c();
    let g = surface::build_cds(&cc).unwrap();
    let p = models::reference_params("sp-cds", &cc).unwrap();
    for vds in [0.0, 1.0, 10.0, 50.0] {
        let got = eval(&g, &p, 0.0, vds);
        let want = p["ADS"] * 1e-4 * (cc.q * cc.eps_sic * p["ND"] * 1e6 / (2.0 * (p["VBI"] + vds))).sqrt();
        assert!((got - want).abs() <= 1e-13 * want);
    }
    // the multi-objective variant derives VBI from the dopings
    let gd = surface::build_cds_derived_vbi(&cc).unwrap();
    let mut pd = IndexMap::new();
    let sp = models::sp_current_reference();
    pd.insert("ADS".to_string(), p["ADS"]);
    pd.insert("ND".to_string(), p["ND"]);
    pd.insert("NA".to_string(), sp["NA"]);
    for vds in [0.0, 5.0, 40.0] {
        let a = eval(&g, &p, 0.0, vds);
        let b = eval(&gd, &pd, 0.0, vds);
        assert!((a - b).abs() <= 1e-12 * a);
    }
}

#[test]
fn cgd_is_below_oxide_capacitance() {
    let cc = c();
    let g = surface::build_cgd(&cc).unwrap();
    let p = models::reference_params("sp-cgd", &cc).unwrap();
    let mut prev = f64::INFINITY;
    for k in 0..=20 {
        let vds = 0.5 * k as f64;
        let v = eval(&g, &p, 0.0, vds);
        assert!(v > 0.0 && v < p["COXD"], "vds {vds}: {v}");
        // deeper depletion as the drain rises
        assert!(v <= prev * (1.0 + 1e-12));
        prev = v;
    }
}

#[test]
fn sp_current_shape() {
    let cc = c();
    let g = models::build_sp_current(&cc).unwrap();
    let p = models::sp_current_reference();
    assert_eq!(eval(&g, &p, 10.0, 0.0), 0.0);
    for vds in [2.0, 20.0] {
        let mut prev = 0.0;
        for vgs in [6.0, 8.0, 10.0, 12.0, 14.0] {
            let i = eval(&g, &p, vgs, vds);
            assert!(i > prev, "vgs {vgs} vds {vds}");
            prev = i;
        }
    }
    let mut prev = 0.0;
    for vds in [0.5, 2.0, 10.0, 30.0, 50.0] {
        let i = eval(&g, &p, 12.0, vds);
        assert!(i > prev);
        prev = i;
    }
}

#[test]
fn sp_multi_graph_shares_leaves() {
    let g = surface::build_sp_multi(&c()).unwrap();
    assert_eq!(g.outputs().len(), 3);
    assert_eq!(g.param_names().len(), 13);
    let model = models::build_model("sp-multi", &c()).unwrap();
    let kinds: Vec<DatasetKind> = model.objectives.iter().map(|o| o.0).collect();
    assert_eq!(kinds, vec![DatasetKind::Iv, DatasetKind::Cds, DatasetKind::Cgd]);
}

proptest! {
    #[test]
    fn vbi_round_trip(na in 14.0f64..19.0, nd in 13.0f64..19.0) {
        let (na, nd) = (10f64.powf(na), 10f64.powf(nd));
        let cc = c();
        let vbi = surface::vbi_from_doping(na, nd, &cc);
        let back = surface::na_from_vbi(vbi, nd, &cc);
        prop_assert!((back - na).abs() <= 1e-10 * na);
    }

    #[test]
    fn npl_matches_closed_form_anywhere(vgs in 0.0f64..20.0, vds in 0.0f64..60.0) {
        let g = models::build_nth_power_law(&c()).unwrap();
        let p = models::nth_power_reference();
        let got = eval(&g, &p, vgs, vds);
        let want = npl_oracle(&p, vgs, vds);
        prop_assert!((got - want).abs() <= 1e-11 * want.abs().max(1e-30));
    }

    #[test]
    fn surface_potential_solves_balance(a in surface::OVERDRIVE_FLOOR..17.0, pf in 0.0f64..50.0) {
        let g = surface::build_surface_potential(&c()).unwrap();
        let p = models::sp_current_reference();
        let vg = p["VFBC"] + a;
        let params: IndexMap<String, f64> = ["TOX", "NA", "VFBC"].iter().map(|n| (n.to_string(), p[*n])).collect();
        let pv = g.bind_params(&params).unwrap();
        let x = g.bind_inputs(&[("Vgs", vg), ("PhiF", pf)]).unwrap();
        let got = g.forward(&pv, &x).unwrap().0[0];
        let want = bisect_phi(vg, pf, p["TOX"], p["NA"], p["VFBC"]);
        prop_assert!((got - want).abs() <= 1e-9 * want.max(1.0));
    }
}
