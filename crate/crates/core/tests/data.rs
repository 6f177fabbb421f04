use mosfit_core::data::{self, Dataset, DatasetKind, Meta, Point, Range, SweepSpec};
use mosfit_core::models;
use mosfit_core::Error;
use proptest::prelude::*;

fn parse(text: &str) -> mosfit_core::Result<Dataset> {
    Dataset::from_csv_reader(text.as_bytes())
}

fn parse_line(text: &str) -> u64 {
    match parse(text) {
        Err(Error::Parse { line, .. }) => line,
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn standard_sweep_has_125_points() {
    let s = SweepSpec::standard();
    assert_eq!(s.count(), 125);
    let pts = s.points();
    assert_eq!(pts.len(), 125);
    assert_eq!((pts[0].vgs, pts[0].vds), (6.0, 2.0));
    assert_eq!((pts[124].vgs, pts[124].vds), (14.0, 50.0));
    // Vgs-major
    assert_eq!((pts[25].vgs, pts[25].vds), (8.0, 2.0));
    for s in [SweepSpec::cds(), SweepSpec::cgd(), SweepSpec::cgs()] {
        assert_eq!(s.count(), 300);
    }
}

#[test]
fn sweep_parse() {
    let s = SweepSpec::parse("vgs=6:14:2,vds=2:50:2").unwrap();
    assert_eq!(s, SweepSpec::standard());
    let s = SweepSpec::parse("vgs=10,vds=0:1:0.25").unwrap();
    assert_eq!(s.count(), 5);
    assert_eq!(SweepSpec::parse("cgd").unwrap(), SweepSpec::cgd());
    for bad in ["", "vgs=1:2", "vgs=1:2:1", "x=1,vds=1", "vgs=a,vds=1", "vgs=2:1:1,vds=1"] {
        assert!(SweepSpec::parse(bad).is_err(), "{bad}");
    }
}

#[test]
fn range_is_inclusive() {
    assert_eq!(Range::new(0.0, 1.0, 0.25).values(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    assert_eq!(Range::linspace(0.0, 1.0, 3).values(), vec![0.0, 0.5, 1.0]);
    // no drift past the end
    assert_eq!(Range::new(0.1, 1.9, 0.1).count(), 19);
}

#[test]
fn csv_errors_carry_line_numbers() {
    assert_eq!(parse_line("kind,vgs,value\niv,1,2\n"), 1);
    assert_eq!(parse_line("kind,vgs,vds,value\niv,1,2,3\niv,1,x,3\n"), 3);
    assert_eq!(parse_line("kind,vgs,vds,value\niv,1,2,3\ncds,1,3,3\n"), 3);
    assert_eq!(parse_line("kind,vgs,vds,value\niv,1,2,3\niv,2,2,3\niv,1,2,4\n"), 4);
    assert_eq!(parse_line("kind,vgs,vds,value\nzz,1,2,3\n"), 2);
    assert_eq!(parse_line("kind,vgs,vds,value\niv,1,2,inf\n"), 2);
    assert_eq!(parse_line("kind,vgs,vds,value\n"), 1);
}

#[test]
fn columns_may_be_reordered() {
    let d = parse("value, vds, vgs, kind\n3.0, 2.0, 1.0, cgd\n").unwrap();
    assert_eq!(d.kind, DatasetKind::Cgd);
    assert_eq!(d.points()[0], Point { vgs: 1.0, vds: 2.0, value: 3.0 });
}

#[test]
fn dataset_invariants() {
    let p = |vgs, vds, value| Point { vgs, vds, value };
    assert!(Dataset::new(DatasetKind::Iv, vec![p(1.0, 1.0, -1e-3)], Meta::default()).is_err());
    // capacitances have no sign rule
    assert!(Dataset::new(DatasetKind::Cgd, vec![p(1.0, 1.0, -1e-3)], Meta::default()).is_ok());
    assert!(Dataset::new(
        DatasetKind::Iv,
        vec![p(1.0, 0.0, 1.0), p(1.0, -0.0, 2.0)],
        Meta::default()
    )
    .is_err());
    let a = Dataset::new(DatasetKind::Iv, vec![p(1.0, 1.0, 1.0)], Meta::default()).unwrap();
    let b = Dataset::new(DatasetKind::Cds, vec![p(1.0, 2.0, 1.0)], Meta::default()).unwrap();
    assert!(a.merged(&b).is_err());
    assert!(a.merged(&a).is_err());
}

#[test]
fn synth_reproduces_model_and_seeds() {
    let p = models::nth_power_reference();
    let clean = data::synth("nth-power-law", &p, &SweepSpec::standard(), 0.0, 0).unwrap();
    assert_eq!(clean.len(), 125);
    let a = data::synth("nth-power-law", &p, &SweepSpec::standard(), 0.05, 9).unwrap();
    let b = data::synth("nth-power-law", &p, &SweepSpec::standard(), 0.05, 9).unwrap();
    let c = data::synth("nth-power-law", &p, &SweepSpec::standard(), 0.05, 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    // multiplicative noise: the relative deviations look like N(0, 0.05²)
    let rel: Vec<f64> = a
        .values()
        .iter()
        .zip(clean.values())
        .filter(|(_, c)| *c > 0.0)
        .map(|(n, c)| n / c - 1.0)
        .collect();
    let mean = rel.iter().sum::<f64>() / rel.len() as f64;
    let sd = (rel.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (rel.len() - 1) as f64).sqrt();
    assert!(mean.abs() < 0.02, "{mean}");
    assert!((sd - 0.05).abs() < 0.015, "{sd}");
    assert!(data::synth("sp-multi", &p, &SweepSpec::standard(), 0.0, 0).is_err());
    assert!(data::synth("nth-power-law", &p, &SweepSpec::standard(), -1.0, 0).is_err());
}

#[test]
fn cgs_curve_is_flat_below_knee() {
    let d = data::synth_cgs(1e-9, -4.9, 5e-8, 1e17, &SweepSpec::cgs(), 0.0, 0).unwrap();
    for pt in d.points() {
        if pt.vgs <= -4.9 {
            assert_eq!(pt.value, 1e-9);
        } else {
            assert!(pt.value < 1e-9);
        }
    }
}

proptest! {
    #[test]
    fn csv_round_trip(vals in proptest::collection::vec((-20.0f64..20.0, 0.0f64..1e-2), 1..40)) {
        let pts: Vec<Point> = vals
            .iter()
            .enumerate()
            .map(|(i, (g, v))| Point { vgs: *g, vds: i as f64 * 0.5, value: *v })
            .collect();
        let d = Dataset::new(DatasetKind::Iv, pts, Meta::default()).unwrap();
        let back = parse(&d.to_csv_string()).unwrap();
        prop_assert_eq!(back.points(), d.points());
        prop_assert_eq!(back.kind, d.kind);
    }

    #[test]
    fn sweep_count_matches_points(a in 0.0f64..5.0, n in 1usize..20, m in 1usize..20) {
        let s = SweepSpec {
            vgs: Range::new(a, a + (n - 1) as f64 * 0.5, 0.5),
            vds: Range::linspace(0.0, 10.0, m),
        };
        prop_assert_eq!(s.count(), n * m);
        prop_assert_eq!(s.points().len(), n * m);
    }
}
