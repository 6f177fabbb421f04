//! N-th-power-law drain current.

use super::PhysicalConstants;
use crate::error::Result;
use crate::graph::{Graph, GraphBuilder, NodeId};

/// Overdrive floor applied before the fractional powers.
pub const OVERDRIVE_FLOOR: f64 = 1e-9;
/// Drain-voltage floor inside the smoothing bracket.
pub const VDS_FLOOR: f64 = 1e-12;

/// `Vds / (1 + (max(Vds, floor)/Vsat)^DELTA)^(1/DELTA)`, shared with the
/// surface-potential model.
pub(crate) fn smooth_vds(b: &mut GraphBuilder, vds: NodeId, vsat: NodeId, delta: NodeId) -> NodeId {
    let vc = b.max_const(vds, VDS_FLOOR);
    let r = b.div(vc, vsat);
    let rd = b.pow(r, delta);
    let bracket = b.add_const(rd, 1.0);
    let one = b.constant(1.0);
    let inv_delta = b.div(one, delta);
    let denom = b.pow(bracket, inv_delta);
    b.div(vds, denom)
}

/// Adds the current expression to `b`, reading inputs `Vgs` and `Vds`.
pub fn nth_power_fragment(b: &mut GraphBuilder) -> NodeId {
    let vgs = b.input("Vgs");
    let vds = b.input("Vds");
    let vth = b.param("VTH");
    let k = b.param("K");
    let m = b.param("M");
    let j = b.param("J");
    let n = b.param("N");
    let lambda = b.param("LAMBDA");
    let theta = b.param("THETA");
    let delta = b.param("DELTA");

    let ov = b.sub(vgs, vth);
    let ovc = b.max_const(ov, OVERDRIVE_FLOOR);
    let ovm = b.pow(ovc, m);
    let vdsat = b.mul(j, ovm);
    let ovn = b.pow(ovc, n);
    let idsat = b.mul(k, ovn);

    let vmod = smooth_vds(b, vds, vdsat, delta);
    let s = b.div(vmod, vdsat);
    let two = b.constant(2.0);
    let two_minus = b.sub(two, s);
    let shape = b.mul(two_minus, s);
    let core = b.mul(idsat, shape);

    let lv = b.mul(lambda, vds);
    let clm = b.add_const(lv, 1.0);
    let tv = b.mul(theta, ov);
    let mob = b.add_const(tv, 1.0);
    let i1 = b.mul(core, clm);
    let isim = b.mul(i1, mob);
    let zero = b.constant(0.0);
    b.select(ov, isim, zero)
}

/// Graph with output `Isim` over inputs `Vgs`, `Vds`.
pub fn build_nth_power_law(_c: &PhysicalConstants) -> Result<Graph> {
    let mut b = GraphBuilder::new();
    let out = nth_power_fragment(&mut b);
    b.build(&[out])
}
