//! Surface-potential based current and capacitance models.
//!
//! The implicit charge-balance equation
//!
//! ```text
//! (a - φ)² = γ_b² φt [ (e^{-φ/φt} + φ/φt - 1) + e^{-(2φF+φt)/φt} (e^{φ/φt} - φ/φt - 1) ]
//! ```
//!
//! with `a = Vg - VFB` is solved inside the graph by a fixed number of Newton
//! steps on its logarithmic form, started from a bracketing estimate, so the
//! backward pass differentiates straight through the iterations.

use super::nth_power::smooth_vds;
use super::PhysicalConstants;
use crate::error::Result;
use crate::graph::{Graph, GraphBuilder, NodeId};

pub const NEWTON_STEPS: usize = 15;
/// Fixed-point passes for the drain series resistance.
pub const RD_PASSES: usize = 5;
/// Below this gate overdrive the solution is scaled linearly to zero.
pub const OVERDRIVE_FLOOR: f64 = 0.01;
pub const SOLVER_TOL: f64 = 1e-9;
/// Floor on `φ/φt - 1` before the fractional powers of the current.
pub const INVERSION_FLOOR: f64 = 1e-12;

/// Returns `(γ, γ_b)`: the charge factor `sqrt(2 ε kT N)` used by the
/// current expression and the dimensionless body factor
/// `γ / (Cox sqrt(φt))` used by the charge balance.
fn body_factor(
    b: &mut GraphBuilder,
    c: &PhysicalConstants,
    doping_si: NodeId,
    cox: NodeId,
) -> (NodeId, NodeId) {
    let g2 = b.mul_const(doping_si, 2.0 * c.eps_sic * c.k * c.t);
    let gamma = b.sqrt(g2);
    let cs = b.mul_const(cox, c.phi_t.sqrt());
    let gb = b.div(gamma, cs);
    (gamma, gb)
}

/// Depletion-only root `(sqrt(a + γ_b²/4) - γ_b/2)²`; an upper bound of the
/// full solution and the pinch-off potential.
fn pinch_off(b: &mut GraphBuilder, a: NodeId, gb: NodeId) -> NodeId {
    let gb2 = b.square(gb);
    let q = b.mul_const(gb2, 0.25);
    let s = b.add(a, q);
    let r = b.sqrt(s);
    let h = b.mul_const(gb, 0.5);
    let d = b.sub(r, h);
    b.square(d)
}

/// Emits the solver for `φs` given the overdrive `a = vg_eff - vfb`, the body
/// factor and the quasi-Fermi offset `phi_f`.
pub fn surface_potential_fragment(
    b: &mut GraphBuilder,
    c: &PhysicalConstants,
    a: NodeId,
    gb: NodeId,
    phi_f: NodeId,
) -> NodeId {
    let pt = c.phi_t;
    let ac = b.max_const(a, OVERDRIVE_FLOOR);
    let gb2 = b.square(gb);
    let kfac = b.mul_const(gb2, pt);

    // shift = (2φF + φt)/φt, cinv = e^{-shift}
    let two_pf = b.mul_const(phi_f, 2.0 / pt);
    let shift = b.add_const(two_pf, 1.0);
    let nshift = b.neg(shift);
    let cinv = b.exp(nshift);

    let pd = pinch_off(b, ac, gb);
    let ac2 = b.square(ac);
    let ratio = b.div(ac2, kfac);
    let lr = b.ln(ratio);
    let sh = b.add(shift, lr);
    let pinv = b.mul_const(sh, pt);
    let half_pd = b.mul_const(pd, 0.5);
    let lower = b.max(pinv, half_pd);
    let mut phi = b.min(pd, lower);

    let residual = |b: &mut GraphBuilder, phi: NodeId| {
        let x = b.mul_const(phi, 1.0 / pt);
        let nx = b.neg(x);
        let em = b.exp(nx);
        let xs = b.sub(x, shift);
        let ei = b.exp(xs);
        let x1 = b.add_const(x, 1.0);
        let cx = b.mul(cinv, x1);
        let t0 = b.add(em, x);
        let t1 = b.add_const(t0, -1.0);
        let t2 = b.add(t1, ei);
        let f = b.sub(t2, cx);
        let d = b.sub(ac, phi);
        let ld = b.ln(d);
        let l2 = b.mul_const(ld, 2.0);
        let kf = b.mul(kfac, f);
        let lk = b.ln(kf);
        let g = b.sub(l2, lk);
        (g, f, em, ei, d)
    };
    for _ in 0..NEWTON_STEPS {
        let (g, f, em, ei, d) = residual(b, phi);
        // g' = -2/d - F'/F with F' = (1 - e^{-x} + e^{x-shift} - cinv)/φt
        let u0 = b.sub(ei, em);
        let u1 = b.add_const(u0, 1.0);
        let u2 = b.sub(u1, cinv);
        let fp = b.mul_const(u2, 1.0 / pt);
        let fpf = b.div(fp, f);
        let m2 = b.constant(-2.0);
        let t = b.div(m2, d);
        let gp = b.sub(t, fpf);
        let step = b.div(g, gp);
        phi = b.sub(phi, step);
    }
    let (g, ..) = residual(b, phi);
    let phi = b.converged(phi, g, SOLVER_TOL);

    let below = b.add_const(a, -OVERDRIVE_FLOOR);
    let frac = b.mul_const(a, 1.0 / OVERDRIVE_FLOOR);
    let scaled = b.mul(phi, frac);
    b.select(below, phi, scaled)
}

/// Current expression; reads inputs `Vgs`, `Vds` and the eight current
/// parameters.
pub fn sp_current_fragment(b: &mut GraphBuilder, c: &PhysicalConstants) -> NodeId {
    let pt = c.phi_t;
    let vgs = b.input("Vgs");
    let vds = b.input("Vds");
    let tox = b.param("TOX");
    let vfbc = b.param("VFBC");
    let na = b.param("NA");
    let scale = b.param("SCALE");
    let rd = b.param("RD");
    let lambda = b.param("LAMBDA");
    let theta = b.param("THETA");
    let delta = b.param("DELTA");

    let na_si = b.mul_const(na, 1e6);
    let scale_si = b.mul_const(scale, 1e-4);
    let eps_ox = b.constant(c.eps_ox);
    let cox = b.div(eps_ox, tox);
    let (gamma, gb) = body_factor(b, c, na_si, cox);

    let a = b.sub(vgs, vfbc);
    let zero = b.constant(0.0);
    let phi_s = surface_potential_fragment(b, c, a, gb, zero);
    let ac = b.max_const(a, OVERDRIVE_FLOOR);
    let vsat = pinch_off(b, ac, gb);

    // u_S = max(φsS/φt - 1, floor) and its powers
    let inv = |b: &mut GraphBuilder, phi: NodeId| {
        let x = b.mul_const(phi, 1.0 / pt);
        let u = b.add_const(x, -1.0);
        let u = b.max_const(u, INVERSION_FLOOR);
        (b.powc(u, 1.5), b.powc(u, 0.5))
    };
    let (us15, us05) = inv(b, phi_s);
    let phi_s2 = b.square(phi_s);
    let apt = b.add_const(a, pt);
    let t1c = b.mul(cox, apt);
    let half_cox = b.mul_const(cox, 0.5);
    let g23 = b.mul_const(gamma, 2.0 / 3.0 * pt);
    let g1 = b.mul_const(gamma, pt);

    let lv = b.mul(lambda, vds);
    let clm = b.add_const(lv, 1.0);
    let tv = b.mul(theta, vgs);
    let mob = b.add_const(tv, 1.0);
    let gain0 = b.mul(scale_si, clm);
    let gain = b.div(gain0, mob);

    let channel = |b: &mut GraphBuilder, v: NodeId| {
        let vmod = smooth_vds(b, v, vsat, delta);
        let phi_d = surface_potential_fragment(b, c, a, gb, vmod);
        let (ud15, ud05) = inv(b, phi_d);
        let dphi = b.sub(phi_d, phi_s);
        let t1 = b.mul(t1c, dphi);
        let pd2 = b.square(phi_d);
        let dsq = b.sub(pd2, phi_s2);
        let t2 = b.mul(half_cox, dsq);
        let d15 = b.sub(ud15, us15);
        let t3 = b.mul(g23, d15);
        let d05 = b.sub(ud05, us05);
        let t4 = b.mul(g1, d05);
        let s1 = b.sub(t1, t2);
        let s2 = b.sub(s1, t3);
        let idd = b.add(s2, t4);
        b.mul(gain, idd)
    };

    let mut v = vds;
    let mut pass = 0;
    loop {
        let i = channel(b, v);
        if pass == RD_PASSES {
            return i;
        }
        let drop = b.mul(i, rd);
        v = b.sub(vds, drop);
        pass += 1;
    }
}

/// Drain current graph, output `Isim`.
pub fn build_sp_current(c: &PhysicalConstants) -> Result<Graph> {
    let mut b = GraphBuilder::new();
    let out = sp_current_fragment(&mut b, c);
    b.build(&[out])
}

/// Standalone solver graph over inputs `Vgs`, `PhiF` and parameters `TOX`,
/// `NA`, `VFBC`; output `φs`.
pub fn build_surface_potential(c: &PhysicalConstants) -> Result<Graph> {
    let mut b = GraphBuilder::new();
    let vg = b.input("Vgs");
    let pf = b.input("PhiF");
    let tox = b.param("TOX");
    let na = b.param("NA");
    let vfb = b.param("VFBC");
    let na_si = b.mul_const(na, 1e6);
    let eps_ox = b.constant(c.eps_ox);
    let cox = b.div(eps_ox, tox);
    let (_, gb) = body_factor(&mut b, c, na_si, cox);
    let a = b.sub(vg, vfb);
    let phi = surface_potential_fragment(&mut b, c, a, gb, pf);
    b.build(&[phi])
}

fn cds_core(
    b: &mut GraphBuilder,
    c: &PhysicalConstants,
    vds: NodeId,
    ads: NodeId,
    nd_si: NodeId,
    vbi: NodeId,
) -> NodeId {
    let ads_si = b.mul_const(ads, 1e-4);
    let num = b.mul_const(nd_si, c.q * c.eps_sic);
    let s = b.add(vbi, vds);
    let den = b.mul_const(s, 2.0);
    let r = b.div(num, den);
    let root = b.sqrt(r);
    b.mul(ads_si, root)
}

/// Drain-source junction capacitance, leaves `ADS`, `ND`, `VBI`.
pub fn build_cds(c: &PhysicalConstants) -> Result<Graph> {
    let mut b = GraphBuilder::new();
    let _vgs = b.input("Vgs");
    let vds = b.input("Vds");
    let ads = b.param("ADS");
    let nd = b.param("ND");
    let nd_si = b.mul_const(nd, 1e6);
    let vbi = b.param("VBI");
    let out = cds_core(&mut b, c, vds, ads, nd_si, vbi);
    b.build(&[out])
}

/// `kT/q · ln(NA·ND/n_i²)` as graph nodes over table-unit dopings.
fn vbi_node(b: &mut GraphBuilder, c: &PhysicalConstants, na: NodeId, nd: NodeId) -> NodeId {
    let p = b.mul(na, nd);
    let r = b.mul_const(p, 1.0 / (c.n_i * c.n_i));
    let l = b.ln(r);
    b.mul_const(l, c.k * c.t / c.q)
}

fn cds_derived_fragment(b: &mut GraphBuilder, c: &PhysicalConstants) -> NodeId {
    let vds = b.input("Vds");
    let ads = b.param("ADS");
    let nd = b.param("ND");
    let na = b.param("NA");
    let nd_si = b.mul_const(nd, 1e6);
    let vbi = vbi_node(b, c, na, nd);
    cds_core(b, c, vds, ads, nd_si, vbi)
}

/// Cds with the built-in voltage derived from `NA` and `ND`.
pub fn build_cds_derived_vbi(c: &PhysicalConstants) -> Result<Graph> {
    let mut b = GraphBuilder::new();
    let _vgs = b.input("Vgs");
    let out = cds_derived_fragment(&mut b, c);
    b.build(&[out])
}

/// Gate-drain capacitance: `COXD` in series with the depletion capacitance
/// of the drift region under the gate, leaves `TOX`, `ND`, `COXD`, `AGD`,
/// `VFBD`.
pub fn cgd_fragment(b: &mut GraphBuilder, c: &PhysicalConstants) -> NodeId {
    let pt = c.phi_t;
    let vgs = b.input("Vgs");
    let vds = b.input("Vds");
    let tox = b.param("TOX");
    let nd = b.param("ND");
    let coxd = b.param("COXD");
    let agd = b.param("AGD");
    let vfbd = b.param("VFBD");

    let nd_si = b.mul_const(nd, 1e6);
    let agd_si = b.mul_const(agd, 1e-4);
    let eps_ox = b.constant(c.eps_ox);
    let cox = b.div(eps_ox, tox);
    let (_, gb) = body_factor(b, c, nd_si, cox);
    let vgd = b.sub(vgs, vds);
    let a = b.sub(vfbd, vgd);
    let phi = surface_potential_fragment(b, c, a, gb, vds);

    // e2 = e^{-(2φF + Vds)/φt} with φF = Vds
    let x = b.mul_const(phi, 1.0 / pt);
    let nx = b.neg(x);
    let em = b.exp(nx);
    let e2arg = b.mul_const(vds, -3.0 / pt);
    let e2 = b.exp(e2arg);
    let xe = b.add(x, e2arg);
    let e2ex = b.exp(xe);

    let n0 = b.constant(1.0);
    let n1 = b.sub(n0, em);
    let n2 = b.add(n1, e2ex);
    let num = b.sub(n2, e2);

    let d0 = b.mul_const(em, pt);
    let d1 = b.add(d0, phi);
    let d2 = b.add_const(d1, -pt);
    let d3 = b.mul_const(e2ex, pt);
    let d4 = b.add(d2, d3);
    let ppt = b.add_const(phi, pt);
    let d5 = b.mul(e2, ppt);
    let den = b.sub(d4, d5);

    let k = b.mul_const(nd_si, 2.0 * c.q * c.eps_sic);
    let rk = b.sqrt(k);
    let pref = b.mul(agd_si, rk);
    let sd = b.sqrt(den);
    let sd2 = b.mul_const(sd, 2.0);
    let ratio = b.div(num, sd2);
    let cdep = b.mul(pref, ratio);

    let prod = b.mul(coxd, cdep);
    let sum = b.add(coxd, cdep);
    b.div(prod, sum)
}

pub fn build_cgd(c: &PhysicalConstants) -> Result<Graph> {
    let mut b = GraphBuilder::new();
    let out = cgd_fragment(&mut b, c);
    b.build(&[out])
}

/// One graph with outputs `[Isim, Cds, Cgd]`; shared parameters are single
/// leaves and VBI is derived from the dopings.
pub fn build_sp_multi(c: &PhysicalConstants) -> Result<Graph> {
    let mut b = GraphBuilder::new();
    let i = sp_current_fragment(&mut b, c);
    let cds = cds_derived_fragment(&mut b, c);
    let cgd = cgd_fragment(&mut b, c);
    b.build(&[i, cds, cgd])
}

/// Built-in voltage from the two dopings (cm⁻³).
pub fn vbi_from_doping(na: f64, nd: f64, c: &PhysicalConstants) -> f64 {
    c.k * c.t / c.q * (na * nd / (c.n_i * c.n_i)).ln()
}

/// Inverse of [`vbi_from_doping`] for `NA`.
pub fn na_from_vbi(vbi: f64, nd: f64, c: &PhysicalConstants) -> f64 {
    c.n_i * c.n_i / nd * (vbi * c.q / (c.k * c.t)).exp()
}
