//! Initial values for the surface-potential model from I-V and C-V data.

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{simulate, BiasPoint, Dataset, DatasetKind};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::models::{self, surface, PhysicalConstants};

/// Fraction of the Vds range (from the top) treated as saturation.
pub const SATURATION_FRACTION: f64 = 0.4;
/// Upper Vds limit of the near-origin segment.
pub const LINEAR_VDS_MAX: f64 = 2.0;
/// Built-in voltage used when neither data nor the user supply one.
pub const DEFAULT_VBI: f64 = 2.5;
/// Reference drain voltage for the ADS inversion.
pub const ADS_REFERENCE_VDS: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    MeasuredSlope,
    Default,
    DerivedEquation,
    Supplied,
    RequiresUserInput,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InitEstimate {
    pub params: IndexMap<String, f64>,
    pub provenance: IndexMap<String, Provenance>,
}

impl InitEstimate {
    pub fn set(&mut self, name: &str, value: f64, how: Provenance) {
        self.params.insert(name.to_string(), value);
        self.provenance.insert(name.to_string(), how);
    }

    pub fn require(&mut self, name: &str) {
        self.params.shift_remove(name);
        self.provenance
            .insert(name.to_string(), Provenance::RequiresUserInput);
    }

    /// Names still marked as needing user input.
    pub fn missing(&self) -> Vec<&str> {
        self.provenance
            .iter()
            .filter(|(_, p)| **p == Provenance::RequiresUserInput)
            .map(|(k, _)| k.as_str())
            .collect()
    }

    /// The values of `model`'s parameters in its declared order.
    pub fn for_model(&self, model: &str) -> Result<IndexMap<String, f64>> {
        let info = models::model_info(model)?;
        info.params
            .iter()
            .map(|d| {
                self.params
                    .get(d.name)
                    .map(|v| (d.name.to_string(), *v))
                    .ok_or_else(|| Error::MissingParam(d.name.to_string()))
            })
            .collect()
    }
}

/// TOX = 50 nm and DELTA = 0.8.
pub fn default_seed() -> InitEstimate {
    let mut e = InitEstimate::default();
    e.set("TOX", 5e-8, Provenance::Default);
    e.set("DELTA", 0.8, Provenance::Default);
    e
}

/// Least-squares line `y = a + b x`; returns `(a, b)`.
fn line_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    let n = x.len() as f64;
    if x.len() < 2 {
        return Err(Error::Estimate("line fit needs at least 2 points".into()));
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Estimate("line fit over a single abscissa".into()));
    }
    let b = sxy / sxx;
    Ok((my - b * mx, b))
}

fn distinct(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// `(Vds, I)` pairs at one gate voltage, sorted by Vds.
fn vgs_slice(iv: &Dataset, vgs: f64) -> (Vec<f64>, Vec<f64>) {
    let mut pts: Vec<_> = iv
        .points()
        .iter()
        .filter(|p| p.vgs == vgs)
        .map(|p| (p.vds, p.value))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts.into_iter().unzip()
}

/// `(Vgs, I)` pairs at one drain voltage, sorted by Vgs.
fn vds_slice(iv: &Dataset, vds: f64) -> (Vec<f64>, Vec<f64>) {
    let mut pts: Vec<_> = iv
        .points()
        .iter()
        .filter(|p| p.vds == vds)
        .map(|p| (p.vgs, p.value))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts.into_iter().unzip()
}

fn expect_kind(d: &Dataset, kind: DatasetKind) -> Result<()> {
    if d.kind != kind {
        return Err(Error::Estimate(format!("expected {kind} data, got {}", d.kind)));
    }
    Ok(())
}

fn saturation_segment(vds: &[f64], i: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let lo = vds.first().copied().unwrap_or(0.0);
    let hi = vds.last().copied().unwrap_or(0.0);
    let cut = hi - SATURATION_FRACTION * (hi - lo);
    vds.iter()
        .zip(i)
        .filter(|(v, _)| **v >= cut - 1e-12)
        .map(|(a, b)| (*a, *b))
        .unzip()
}

/// Conductance-weighted on-resistance `Σv² / Σv·i` over the near-origin
/// points of one gate voltage.
fn on_resistance(vds: &[f64], i: &[f64]) -> Option<f64> {
    let (mut vv, mut vi, mut n) = (0.0, 0.0, 0);
    for (v, c) in vds.iter().zip(i) {
        if *v > 0.0 && *v <= LINEAR_VDS_MAX {
            vv += v * v;
            vi += v * c;
            n += 1;
        }
    }
    (n >= 3 && vi > 0.0).then(|| vv / vi)
}

/// LAMBDA from the saturation segment at the highest Vgs, RD from the
/// near-origin on-resistance extrapolated to infinite gate overdrive.
pub fn estimate_lambda_rd(iv: &Dataset) -> Result<(f64, f64)> {
    Ok((estimate_lambda(iv)?, estimate_rd(iv)?))
}

pub fn estimate_lambda(iv: &Dataset) -> Result<f64> {
    expect_kind(iv, DatasetKind::Iv)?;
    let gates = distinct(iv.points().iter().map(|p| p.vgs).collect());
    let top = *gates.last().ok_or(Error::EmptyDataset)?;
    let (vds, i) = vgs_slice(iv, top);
    let (sv, si) = saturation_segment(&vds, &i);
    if sv.len() < 3 {
        return Err(Error::Estimate(
            "fewer than 3 saturation points at the highest Vgs".into(),
        ));
    }
    let (i0, slope) = line_fit(&sv, &si)?;
    if i0 <= 0.0 {
        return Err(Error::Estimate("non-positive saturation intercept".into()));
    }
    Ok((slope / i0).max(0.0))
}

/// Needs at least 3 points with Vds <= [`LINEAR_VDS_MAX`] at the highest Vgs.
pub fn estimate_rd(iv: &Dataset) -> Result<f64> {
    expect_kind(iv, DatasetKind::Iv)?;
    let gates = distinct(iv.points().iter().map(|p| p.vgs).collect());
    let top = *gates.last().ok_or(Error::EmptyDataset)?;
    let mut vg = Vec::new();
    let mut ron = Vec::new();
    for &g in &gates {
        let (v, c) = vgs_slice(iv, g);
        if let Some(r) = on_resistance(&v, &c) {
            vg.push(g);
            ron.push(r);
        }
    }
    let r_top = *ron.last().ok_or_else(|| {
        Error::Estimate("fewer than 3 near-origin points at the highest Vgs".into())
    })?;
    if vg.last() != Some(&top) {
        return Err(Error::Estimate(
            "fewer than 3 near-origin points at the highest Vgs".into(),
        ));
    }
    let rd = if vg.len() >= 3 {
        // R_on(Vg) = RD + c/(Vg - Vt), best Vt on a grid below the lowest gate
        let lowest = vg[0];
        let mut best = (f64::INFINITY, r_top);
        for k in 0..2000 {
            let vt = lowest - 20.0 + 20.0 * k as f64 / 2000.0 - 0.05;
            let x: Vec<f64> = vg.iter().map(|g| 1.0 / (g - vt)).collect();
            let Ok((r0, cc)) = line_fit(&x, &ron) else { continue };
            let res: f64 = x
                .iter()
                .zip(&ron)
                .map(|(xi, r)| (r0 + cc * xi - r).powi(2))
                .sum();
            if res < best.0 {
                best = (res, r0);
            }
        }
        best.1
    } else {
        r_top
    };
    Ok(rd.clamp(0.01 * r_top, r_top))
}

/// Gain from the square-root slope of the saturation Id-Vgs slice and THETA
/// from the linear-region slice `G = β(Vg - Vt)/(1 + θ Vg)`, regressed as
/// `G = β Vg - β Vt - θ G Vg`.
pub fn estimate_k_theta(iv: &Dataset) -> Result<(f64, f64)> {
    expect_kind(iv, DatasetKind::Iv)?;
    let drains = distinct(iv.points().iter().map(|p| p.vds).collect());
    let slices: Vec<(f64, Vec<f64>, Vec<f64>)> = drains
        .iter()
        .filter(|v| **v > 0.0)
        .map(|&v| {
            let (g, i) = vds_slice(iv, v);
            (v, g, i)
        })
        .filter(|(_, g, _)| g.len() >= 4)
        .collect();
    let (_, sg, si) = slices
        .last()
        .ok_or_else(|| Error::Estimate("no Id-Vgs slice with 4 or more gate voltages".into()))?;
    let sq: Vec<f64> = si.iter().map(|v| v.max(0.0).sqrt()).collect();
    let (_, s) = line_fit(sg, &sq)?;
    let gain = s * s;

    let (vds, g, i) = &slices[0];
    let cond: Vec<f64> = i.iter().map(|c| c / vds).collect();
    let x = DMatrix::from_fn(g.len(), 3, |r, col| match col {
        0 => g[r],
        1 => 1.0,
        _ => -cond[r] * g[r],
    });
    let y = DVector::from_column_slice(&cond);
    let sol = x
        .svd(true, true)
        .solve(&y, 1e-14)
        .map_err(|e| Error::Estimate(e.to_string()))?;
    Ok((gain, sol[2].max(0.0)))
}

/// Three-point moving average; the end points keep their own values.
fn smooth3(v: &[f64]) -> Vec<f64> {
    (0..v.len())
        .map(|i| {
            if i == 0 || i + 1 == v.len() {
                v[i]
            } else {
                (v[i - 1] + v[i] + v[i + 1]) / 3.0
            }
        })
        .collect()
}

/// Vgs of the largest second difference of the smoothed Cgs curve.
pub fn estimate_vfbc(cgs: &Dataset) -> Result<f64> {
    expect_kind(cgs, DatasetKind::Cgs)?;
    let mut pts: Vec<_> = cgs.points().iter().map(|p| (p.vgs, p.value)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pts.len() < 5 {
        return Err(Error::Estimate("Cgs curve needs at least 5 points".into()));
    }
    let (v, c): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    let s = smooth3(&c);
    let scale = s.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let mut best = (0.0, None);
    for i in 2..s.len() - 2 {
        let d2 = (s[i + 1] - 2.0 * s[i] + s[i - 1]).abs();
        if d2 > best.0 {
            best = (d2, Some(i));
        }
    }
    match best.1 {
        Some(i) if best.0 > 1e-9 * scale => Ok(v[i]),
        _ => Err(Error::Estimate("no knee in the Cgs curve".into())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapChain {
    pub coxd: f64,
    pub vfbd: f64,
    /// cm²
    pub agd: f64,
    /// cm⁻³
    pub nd: f64,
    /// cm⁻³
    pub na: f64,
    pub vbi: f64,
    pub vbi_provenance: Provenance,
    /// cm²
    pub ads: f64,
}

/// Capacitance parameters. COXD is the Cgd plateau; the depletion branch
/// `(1/C - 1/COXD)² = 2(VFBD - Vgd)/(q ε ND AGD²)` gives ND from its slope
/// and VFBD from its zero crossing. VBI comes from the `1/Cds²` line unless
/// supplied, then NA follows from VBI and ND, and ADS from Cds at the
/// reference drain voltage.
pub fn estimate_cap_chain(
    cgd: &Dataset,
    cds: &Dataset,
    c: &PhysicalConstants,
    tox: f64,
    vbi: Option<f64>,
) -> Result<CapChain> {
    expect_kind(cgd, DatasetKind::Cgd)?;
    expect_kind(cds, DatasetKind::Cds)?;
    let mut pts: Vec<_> = cgd.points().iter().map(|p| (p.vgs - p.vds, p.value)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (vgd, cv): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    if cv.len() < 5 {
        return Err(Error::Estimate("Cgd curve needs at least 5 points".into()));
    }
    let coxd = smooth3(&cv).into_iter().fold(f64::NEG_INFINITY, f64::max);
    if !(coxd > 0.0) {
        return Err(Error::Estimate("no positive Cgd plateau".into()));
    }
    let agd_si = coxd * tox / c.eps_ox;

    let (x, y): (Vec<f64>, Vec<f64>) = vgd
        .iter()
        .zip(&cv)
        .filter(|(v, cc)| **v < -1.0 && **cc > 0.0 && **cc < coxd)
        .map(|(v, cc)| (*v, (1.0 / cc - 1.0 / coxd).powi(2)))
        .unzip();
    if x.len() < 3 {
        return Err(Error::Estimate("too few Cgd points in depletion".into()));
    }
    let (i0, s) = line_fit(&x, &y)?;
    let sl = -s;
    if !(sl > 0.0) {
        return Err(Error::Estimate("Cgd depletion branch has no positive slope".into()));
    }
    let vfbd = i0 / sl;
    let nd_si = 2.0 / (sl * agd_si * agd_si * c.q * c.eps_sic);
    let nd = nd_si / 1e6;

    let mut cp: Vec<_> = cds.points().iter().map(|p| (p.vds, p.value)).collect();
    cp.sort_by(|a, b| a.0.total_cmp(&b.0));
    if cp.len() < 2 || cp.iter().any(|p| p.1 <= 0.0) {
        return Err(Error::Estimate("Cds needs 2 or more positive points".into()));
    }
    let (vbi, how) = match vbi {
        Some(v) => (v, Provenance::Supplied),
        None => {
            let (xv, yv): (Vec<f64>, Vec<f64>) = cp.iter().map(|(v, cc)| (*v, 1.0 / (cc * cc))).unzip();
            let (a, b) = line_fit(&xv, &yv)?;
            (a / b, Provenance::DerivedEquation)
        }
    };
    if !(vbi > 0.0) || !vbi.is_finite() {
        return Err(Error::Estimate(format!("built-in voltage {vbi:e} is not positive")));
    }
    let na = surface::na_from_vbi(vbi, nd, c);
    let &(vr, cr) = cp
        .iter()
        .min_by(|a, b| (a.0 - ADS_REFERENCE_VDS).abs().total_cmp(&(b.0 - ADS_REFERENCE_VDS).abs()))
        .expect("non-empty");
    let ads_si = cr / (c.q * c.eps_sic * nd_si / (2.0 * (vbi + vr))).sqrt();

    for (name, v) in [("ND", nd), ("NA", na), ("ADS", ads_si)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::Estimate(format!("{name} inversion gave {v:e}")));
        }
    }
    Ok(CapChain {
        coxd,
        vfbd,
        agd: agd_si * 1e4,
        nd,
        na,
        vbi,
        vbi_provenance: how,
        ads: ads_si * 1e4,
    })
}

/// SCALE such that the model with every other parameter fixed matches the
/// median saturation current at the highest Vgs.
pub fn estimate_scale(iv: &Dataset, params: &IndexMap<String, f64>, c: &PhysicalConstants) -> Result<f64> {
    expect_kind(iv, DatasetKind::Iv)?;
    let gates = distinct(iv.points().iter().map(|p| p.vgs).collect());
    let top = *gates.last().ok_or(Error::EmptyDataset)?;
    let (vds, i) = vgs_slice(iv, top);
    let (sv, si) = saturation_segment(&vds, &i);
    if sv.is_empty() {
        return Err(Error::Estimate("no saturation points".into()));
    }
    let g = surface::build_sp_current(c)?;
    let mut p = params.clone();
    p.insert("SCALE".into(), 1.0);
    let pv = g.bind_params(&p)?;
    let bias: Vec<_> = sv.iter().map(|&vds| BiasPoint { vgs: top, vds }).collect();
    let sim = simulate(&g, &pv, &bias, Exec::Sequential)?;
    let mut r: Vec<f64> = si
        .iter()
        .zip(&sim)
        .filter(|(_, s)| **s > 0.0)
        .map(|(m, s)| m / s)
        .collect();
    if r.is_empty() {
        return Err(Error::Estimate("model current is zero in saturation".into()));
    }
    r.sort_by(f64::total_cmp);
    let scale = r[r.len() / 2];
    if !(scale > 0.0) {
        return Err(Error::Estimate("non-positive SCALE".into()));
    }
    Ok(scale)
}

/// Whatever measurements are available for one device.
#[derive(Clone, Debug, Default)]
pub struct MeasurementBundle {
    pub iv: Option<Dataset>,
    pub cds: Option<Dataset>,
    pub cgd: Option<Dataset>,
    pub cgs: Option<Dataset>,
}

/// Runs every estimator the data allows. Parameters whose data is missing
/// are marked as requiring user input; `vbi` overrides the value fitted
/// from Cds.
pub fn initialize_sp(bundle: &MeasurementBundle, vbi: Option<f64>, c: &PhysicalConstants) -> Result<InitEstimate> {
    let mut e = default_seed();
    let tox = e.params["TOX"];

    match &bundle.cgs {
        Some(d) => e.set("VFBC", estimate_vfbc(d)?, Provenance::MeasuredSlope),
        None => e.require("VFBC"),
    }
    match (&bundle.cgd, &bundle.cds) {
        (Some(cgd), Some(cds)) => {
            let ch = estimate_cap_chain(cgd, cds, c, tox, vbi)?;
            e.set("NA", ch.na, Provenance::DerivedEquation);
            e.set("ADS", ch.ads, Provenance::DerivedEquation);
            e.set("ND", ch.nd, Provenance::MeasuredSlope);
            e.set("COXD", ch.coxd, Provenance::MeasuredSlope);
            e.set("AGD", ch.agd, Provenance::DerivedEquation);
            e.set("VFBD", ch.vfbd, Provenance::MeasuredSlope);
            e.set("VBI", ch.vbi, ch.vbi_provenance);
        }
        _ => {
            for n in ["NA", "ADS", "ND", "COXD", "AGD", "VFBD"] {
                e.require(n);
            }
            match vbi {
                Some(v) => e.set("VBI", v, Provenance::Supplied),
                None => e.set("VBI", DEFAULT_VBI, Provenance::Default),
            }
        }
    }
    match &bundle.iv {
        Some(iv) => {
            let lambda = estimate_lambda(iv)?;
            let (_, theta) = estimate_k_theta(iv)?;
            // sweeps without near-origin points leave RD to the user
            match estimate_rd(iv) {
                Ok(rd) => e.set("RD", rd, Provenance::MeasuredSlope),
                Err(Error::Estimate(_)) => e.require("RD"),
                Err(err) => return Err(err),
            }
            e.set("LAMBDA", lambda, Provenance::MeasuredSlope);
            e.set("THETA", theta, Provenance::MeasuredSlope);
            let needed = ["TOX", "VFBC", "NA", "RD", "LAMBDA", "THETA", "DELTA"];
            if needed.iter().all(|n| e.params.contains_key(*n)) {
                let scale = estimate_scale(iv, &e.params, c)?;
                e.set("SCALE", scale, Provenance::DerivedEquation);
            } else {
                e.require("SCALE");
            }
        }
        None => {
            for n in ["SCALE", "RD", "LAMBDA", "THETA"] {
                e.require(n);
            }
        }
    }

    // declared parameter order, VBI last
    let mut out = InitEstimate::default();
    for d in models::SP_MULTI_PARAMS.iter().map(|d| d.name).chain(["VBI"]) {
        if let Some(p) = e.provenance.get(d) {
            match e.params.get(d) {
                Some(v) => out.set(d, *v, *p),
                None => out.require(d),
            }
        }
    }
    Ok(out)
}
