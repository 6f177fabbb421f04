//! MOSFET model equations expressed as graph builders, plus the model
//! registry used by the CLI.
//!
//! Parameter leaves carry the customary table units (V, m, cm⁻³, cm², F, Ω);
//! conversion to SI happens through constant multiplications inside each
//! graph, so gradients are taken with respect to the table-unit values.

pub mod nth_power;
pub mod surface;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::DatasetKind;
use crate::error::{Error, Result};
use crate::graph::Graph;

pub use nth_power::build_nth_power_law;
pub use surface::{
    build_cds, build_cds_derived_vbi, build_cgd, build_sp_current, build_sp_multi,
    build_surface_potential, na_from_vbi, vbi_from_doping,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicalConstants {
    /// Boltzmann constant, J/K.
    pub k: f64,
    /// Elementary charge, C.
    pub q: f64,
    /// Temperature, K.
    pub t: f64,
    /// Thermal voltage, V.
    pub phi_t: f64,
    /// SiC permittivity, F/m.
    pub eps_sic: f64,
    /// Oxide permittivity, F/m.
    pub eps_ox: f64,
    /// Intrinsic carrier concentration, cm⁻³.
    pub n_i: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        PhysicalConstants {
            k: 1.38e-23,
            q: 1.60e-19,
            t: 298.0,
            phi_t: 0.026,
            eps_sic: 9.7 * 8.85e-12,
            eps_ox: 3.9 * 8.85e-12,
            n_i: 4.82e15,
        }
    }
}

/// Registry entry for one parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ParamDef {
    pub name: &'static str,
    pub unit: &'static str,
    /// Multiplier from the table unit to SI, applied inside the graph.
    pub si_factor: f64,
    pub lo: f64,
    pub hi: f64,
}

const fn def(name: &'static str, unit: &'static str, si_factor: f64, lo: f64, hi: f64) -> ParamDef {
    ParamDef {
        name,
        unit,
        si_factor,
        lo,
        hi,
    }
}

pub const NTH_POWER_PARAMS: &[ParamDef] = &[
    def("VTH", "V", 1.0, 0.5, 10.0),
    def("K", "-", 1.0, 1e-6, 1.0),
    def("M", "-", 1.0, 0.5, 4.0),
    def("J", "-", 1.0, 1e-3, 10.0),
    def("N", "-", 1.0, 1.0, 6.0),
    def("LAMBDA", "1/V", 1.0, 0.0, 0.1),
    def("THETA", "1/V", 1.0, 0.0, 0.1),
    def("DELTA", "-", 1.0, 0.1, 10.0),
];

pub const SP_CURRENT_PARAMS: &[ParamDef] = &[
    def("TOX", "m", 1.0, 1e-9, 1e-6),
    def("VFBC", "V", 1.0, -20.0, 10.0),
    def("NA", "cm^-3", 1e6, 1e14, 1e19),
    def("SCALE", "cm^2/V", 1e-4, 1.0, 1e10),
    def("RD", "ohm", 1.0, 0.0, 1.0),
    def("LAMBDA", "1/V", 1.0, 0.0, 0.1),
    def("THETA", "1/V", 1.0, 0.0, 0.1),
    def("DELTA", "-", 1.0, 0.1, 10.0),
];

pub const SP_CDS_PARAMS: &[ParamDef] = &[
    def("ADS", "cm^2", 1e-4, 1e-6, 10.0),
    def("ND", "cm^-3", 1e6, 1e13, 1e19),
    def("VBI", "V", 1.0, 0.01, 5.0),
];

pub const SP_CGD_PARAMS: &[ParamDef] = &[
    def("TOX", "m", 1.0, 1e-9, 1e-6),
    def("ND", "cm^-3", 1e6, 1e13, 1e19),
    def("COXD", "F", 1.0, 1e-13, 1e-7),
    def("AGD", "cm^2", 1e-4, 1e-8, 10.0),
    def("VFBD", "V", 1.0, -10.0, 10.0),
];

pub const SP_MULTI_PARAMS: &[ParamDef] = &[
    def("TOX", "m", 1.0, 1e-9, 1e-6),
    def("VFBC", "V", 1.0, -20.0, 10.0),
    def("NA", "cm^-3", 1e6, 1e14, 1e19),
    def("SCALE", "cm^2/V", 1e-4, 1.0, 1e10),
    def("RD", "ohm", 1.0, 0.0, 1.0),
    def("LAMBDA", "1/V", 1.0, 0.0, 0.1),
    def("THETA", "1/V", 1.0, 0.0, 0.1),
    def("DELTA", "-", 1.0, 0.1, 10.0),
    def("ADS", "cm^2", 1e-4, 1e-6, 10.0),
    def("ND", "cm^-3", 1e6, 1e13, 1e19),
    def("COXD", "F", 1.0, 1e-13, 1e-7),
    def("AGD", "cm^2", 1e-4, 1e-8, 10.0),
    def("VFBD", "V", 1.0, -10.0, 10.0),
];

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ModelInfo {
    pub name: &'static str,
    pub params: &'static [ParamDef],
    /// Dataset kinds consumed, one objective per kind.
    pub kinds: &'static [DatasetKind],
}

impl ModelInfo {
    pub fn param_names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.to_string()).collect()
    }

    pub fn bounds(&self) -> IndexMap<String, (f64, f64)> {
        self.params
            .iter()
            .map(|p| (p.name.to_string(), (p.lo, p.hi)))
            .collect()
    }

    /// Checks that `params` names exactly this model's parameters and that
    /// every value is finite.
    pub fn validate(&self, params: &IndexMap<String, f64>) -> Result<()> {
        for p in self.params {
            match params.get(p.name) {
                None => return Err(Error::MissingParam(p.name.to_string())),
                Some(v) if !v.is_finite() => {
                    return Err(Error::InvalidParam {
                        name: p.name.to_string(),
                        detail: "not finite".into(),
                    })
                }
                _ => {}
            }
        }
        if let Some(extra) = params.keys().find(|k| !self.params.iter().any(|p| p.name == *k)) {
            return Err(Error::UnknownParam(extra.clone()));
        }
        Ok(())
    }
}

static REGISTRY: &[ModelInfo] = &[
    ModelInfo {
        name: "nth-power-law",
        params: NTH_POWER_PARAMS,
        kinds: &[DatasetKind::Iv],
    },
    ModelInfo {
        name: "sp-current",
        params: SP_CURRENT_PARAMS,
        kinds: &[DatasetKind::Iv],
    },
    ModelInfo {
        name: "sp-cds",
        params: SP_CDS_PARAMS,
        kinds: &[DatasetKind::Cds],
    },
    ModelInfo {
        name: "sp-cgd",
        params: SP_CGD_PARAMS,
        kinds: &[DatasetKind::Cgd],
    },
    ModelInfo {
        name: "sp-multi",
        params: SP_MULTI_PARAMS,
        kinds: &[DatasetKind::Iv, DatasetKind::Cds, DatasetKind::Cgd],
    },
];

pub fn registry() -> &'static [ModelInfo] {
    REGISTRY
}

pub fn model_names() -> Vec<&'static str> {
    REGISTRY.iter().map(|m| m.name).collect()
}

pub fn model_info(name: &str) -> Result<&'static ModelInfo> {
    REGISTRY
        .iter()
        .find(|m| m.name == name)
        .ok_or_else(|| Error::UnknownModel {
            name: name.to_string(),
            known: model_names().join(", "),
        })
}

/// A registered model with one graph per objective.
#[derive(Clone, Debug)]
pub struct Model {
    pub info: &'static ModelInfo,
    pub objectives: Vec<(DatasetKind, Graph)>,
}

impl Model {
    pub fn graph(&self, kind: DatasetKind) -> Option<&Graph> {
        self.objectives.iter().find(|(k, _)| *k == kind).map(|(_, g)| g)
    }
}

pub fn build_model(name: &str, c: &PhysicalConstants) -> Result<Model> {
    let info = model_info(name)?;
    let objectives = match name {
        "nth-power-law" => vec![(DatasetKind::Iv, build_nth_power_law(c)?)],
        "sp-current" => vec![(DatasetKind::Iv, build_sp_current(c)?)],
        "sp-cds" => vec![(DatasetKind::Cds, build_cds(c)?)],
        "sp-cgd" => vec![(DatasetKind::Cgd, build_cgd(c)?)],
        "sp-multi" => vec![
            (DatasetKind::Iv, build_sp_current(c)?),
            (DatasetKind::Cds, build_cds_derived_vbi(c)?),
            (DatasetKind::Cgd, build_cgd(c)?),
        ],
        _ => unreachable!("registry and builder list out of sync"),
    };
    Ok(Model { info, objectives })
}

fn map(pairs: &[(&str, f64)]) -> IndexMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Extracted N-th-power-law values used as synthetic ground truth.
pub fn nth_power_reference() -> IndexMap<String, f64> {
    map(&[
        ("VTH", 2.600),
        ("K", 2.691e-3),
        ("M", 1.743),
        ("J", 0.119),
        ("N", 3.284),
        ("LAMBDA", 2.606e-3),
        ("THETA", 3.440e-4),
        ("DELTA", 1.269),
    ])
}

/// Extracted SP current values used as synthetic ground truth. THETA and
/// VFBC use the magnitudes of the hand-determined starting values.
pub fn sp_current_reference() -> IndexMap<String, f64> {
    map(&[
        ("TOX", 4.788e-8),
        ("VFBC", -1.812),
        ("NA", 1.313e17),
        ("SCALE", 5403054.0),
        ("RD", 2.7178e-3),
        ("LAMBDA", 6.110e-3),
        ("THETA", 5.912e-3),
        ("DELTA", 0.6170),
    ])
}

/// Initial SP current values (hand-determined starting point).
pub fn sp_current_initial() -> IndexMap<String, f64> {
    map(&[
        ("TOX", 5e-8),
        ("VFBC", -4.90),
        ("NA", 1.31e17),
        ("SCALE", 5166360.0),
        ("RD", 2.90e-3),
        ("LAMBDA", 8.69e-3),
        ("THETA", 5.91e-3),
        ("DELTA", 0.80),
    ])
}

/// Initial capacitance values (hand-determined starting point).
pub fn capacitance_initial() -> IndexMap<String, f64> {
    map(&[
        ("ADS", 0.00776),
        ("ND", 5.27e15),
        ("COXD", 4.36e-10),
        ("AGD", 6.31e-5),
        ("VFBD", 1.00),
    ])
}

/// Extracted capacitance values used as synthetic ground truth.
pub fn capacitance_reference() -> IndexMap<String, f64> {
    map(&[
        ("ADS", 0.0250),
        ("ND", 5.266e15),
        ("COXD", 4.360e-10),
        ("AGD", 5.549e-3),
        ("VFBD", 0.1055),
    ])
}

/// Ground truth for every registered model.
pub fn reference_params(model: &str, c: &PhysicalConstants) -> Result<IndexMap<String, f64>> {
    let sp = sp_current_reference();
    let cap = capacitance_reference();
    let vbi = vbi_from_doping(sp["NA"], cap["ND"], c);
    let out = match model_info(model)?.name {
        "nth-power-law" => nth_power_reference(),
        "sp-current" => sp,
        "sp-cds" => map(&[("ADS", cap["ADS"]), ("ND", cap["ND"]), ("VBI", vbi)]),
        "sp-cgd" => map(&[
            ("TOX", sp["TOX"]),
            ("ND", cap["ND"]),
            ("COXD", cap["COXD"]),
            ("AGD", cap["AGD"]),
            ("VFBD", cap["VFBD"]),
        ]),
        _ => {
            let mut m = sp;
            m.extend(cap);
            m
        }
    };
    Ok(out)
}
