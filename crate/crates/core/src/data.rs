//! Datasets, bias sweeps, CSV ingestion and synthetic data generation.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{fold_points, Exec};
use crate::graph::{Graph, Tape};
use crate::models::{self, PhysicalConstants};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Iv,
    Cds,
    Cgd,
    Cgs,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 4] = [
        DatasetKind::Iv,
        DatasetKind::Cds,
        DatasetKind::Cgd,
        DatasetKind::Cgs,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Iv => "iv",
            DatasetKind::Cds => "cds",
            DatasetKind::Cgd => "cgd",
            DatasetKind::Cgs => "cgs",
        }
    }

    /// Magnitude floor for per-point normalization (A for currents, F for
    /// capacitances).
    pub fn normalization_floor(self) -> f64 {
        match self {
            DatasetKind::Iv => 1e-6,
            _ => 1e-18,
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidDataset(format!("unknown dataset kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasPoint {
    pub vgs: f64,
    pub vds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub vgs: f64,
    pub vds: f64,
    pub value: f64,
}

impl Point {
    pub fn bias(&self) -> BiasPoint {
        BiasPoint {
            vgs: self.vgs,
            vds: self.vds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub device: String,
    pub temperature: f64,
}

impl Default for Meta {
    fn default() -> Self {
        Meta {
            device: "synthetic".into(),
            temperature: 298.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub kind: DatasetKind,
    points: Vec<Point>,
    pub meta: Meta,
}

fn bias_key(vgs: f64, vds: f64) -> (u64, u64) {
    // +0.0 and -0.0 are the same bias
    ((vgs + 0.0).to_bits(), (vds + 0.0).to_bits())
}

impl Dataset {
    pub fn new(kind: DatasetKind, points: Vec<Point>, meta: Meta) -> Result<Self> {
        let mut seen = HashMap::with_capacity(points.len());
        for (i, p) in points.iter().enumerate() {
            if !(p.vgs.is_finite() && p.vds.is_finite() && p.value.is_finite()) {
                return Err(Error::InvalidDataset(format!("point {i}: non-finite value")));
            }
            if kind == DatasetKind::Iv && p.value < 0.0 {
                return Err(Error::InvalidDataset(format!(
                    "point {i}: negative current {:e}",
                    p.value
                )));
            }
            if let Some(j) = seen.insert(bias_key(p.vgs, p.vds), i) {
                return Err(Error::InvalidDataset(format!(
                    "points {j} and {i} share bias (vgs={}, vds={})",
                    p.vgs, p.vds
                )));
            }
        }
        Ok(Dataset { kind, points, meta })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.value).collect()
    }

    pub fn peak(&self) -> f64 {
        self.points.iter().map(|p| p.value.abs()).fold(0.0, f64::max)
    }

    /// Appends the points of `other`, which must be of the same kind.
    pub fn merged(&self, other: &Dataset) -> Result<Dataset> {
        if self.kind != other.kind {
            return Err(Error::InvalidDataset(format!(
                "cannot merge {} with {}",
                self.kind, other.kind
            )));
        }
        let mut pts = self.points.clone();
        pts.extend_from_slice(&other.points);
        Dataset::new(self.kind, pts, self.meta.clone())
    }

    /// Same dataset with every value multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Result<Dataset> {
        let pts = self
            .points
            .iter()
            .map(|p| Point {
                value: p.value * k,
                ..*p
            })
            .collect();
        Dataset::new(self.kind, pts, self.meta.clone())
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let file = fs::File::open(path)?;
        let mut ds = Dataset::from_csv_reader(file)?;
        if let Some(stem) = path.file_stem() {
            ds.meta.device = stem.to_string_lossy().into_owned();
        }
        Ok(ds)
    }

    /// Parses the `kind,vgs,vds,value` schema. All rows must share one kind.
    pub fn from_csv_reader(r: impl Read) -> Result<Dataset> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| {
            headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
                line: 1,
                detail: format!("missing column `{name}`"),
            })
        };
        let (ck, cg, cd, cv) = (col("kind")?, col("vgs")?, col("vds")?, col("value")?);
        let mut kind: Option<DatasetKind> = None;
        let mut points = Vec::new();
        let mut seen: HashMap<(u64, u64), u64> = HashMap::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let cell = |i: usize, name: &str| {
                rec.get(i).ok_or_else(|| Error::Parse {
                    line,
                    detail: format!("missing `{name}` cell"),
                })
            };
            let num = |i: usize, name: &str| -> Result<f64> {
                let s = cell(i, name)?;
                let v: f64 = s.parse().map_err(|_| Error::Parse {
                    line,
                    detail: format!("non-numeric `{name}` cell `{s}`"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line,
                        detail: format!("non-finite `{name}`"),
                    });
                }
                Ok(v)
            };
            let k: DatasetKind = cell(ck, "kind")?.parse().map_err(|e: Error| Error::Parse {
                line,
                detail: e.to_string(),
            })?;
            match kind {
                None => kind = Some(k),
                Some(prev) if prev != k => {
                    return Err(Error::Parse {
                        line,
                        detail: format!("kind `{k}` differs from `{prev}`"),
                    })
                }
                _ => {}
            }
            let p = Point {
                vgs: num(cg, "vgs")?,
                vds: num(cd, "vds")?,
                value: num(cv, "value")?,
            };
            if let Some(first) = seen.insert(bias_key(p.vgs, p.vds), line) {
                return Err(Error::Parse {
                    line,
                    detail: format!("duplicate bias point (first on line {first})"),
                });
            }
            points.push(p);
        }
        let kind = kind.ok_or_else(|| Error::Parse {
            line: 1,
            detail: "no data rows".into(),
        })?;
        Dataset::new(kind, points, Meta::default())
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("kind,vgs,vds,value\n");
        for p in &self.points {
            s.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e}\n",
                self.kind, p.vgs, p.vds, p.value
            ));
        }
        s
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

/// Inclusive arithmetic range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Range {
    pub fn new(start: f64, stop: f64, step: f64) -> Self {
        Range { start, stop, step }
    }

    /// `n` points from `start` to `stop`.
    pub fn linspace(start: f64, stop: f64, n: usize) -> Self {
        if n <= 1 {
            return Range { start, stop: start, step: 1.0 };
        }
        Range { start, stop, step: (stop - start) / (n - 1) as f64 }
    }

    pub fn count(&self) -> usize {
        ((self.stop - self.start) / self.step + 1e-9).floor() as usize + 1
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.count())
            .map(|i| self.start + i as f64 * self.step)
            .collect()
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.step > 0.0) || !self.start.is_finite() || !(self.stop >= self.start) {
            return Err(Error::Config(format!(
                "{name} range needs step > 0 and stop >= start"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub vgs: Range,
    pub vds: Range,
}

impl SweepSpec {
    /// Vgs 6..14 V step 2 × Vds 2..50 V step 2: 125 points.
    pub fn standard() -> Self {
        SweepSpec {
            vgs: Range::new(6.0, 14.0, 2.0),
            vds: Range::new(2.0, 50.0, 2.0),
        }
    }

    /// Near-origin companion of [`SweepSpec::standard`]: Vds 0.1..1.9 V.
    pub fn near_origin() -> Self {
        SweepSpec {
            vgs: Range::new(6.0, 14.0, 2.0),
            vds: Range::new(0.1, 1.9, 0.1),
        }
    }

    /// Cds sweep: Vds 0..50 V, 300 points.
    pub fn cds() -> Self {
        SweepSpec {
            vgs: Range::new(0.0, 0.0, 1.0),
            vds: Range::linspace(0.0, 50.0, 300),
        }
    }

    /// Cgd sweep: Vgd -10..0 V (Vgs = 0, Vds = -Vgd), 300 points.
    pub fn cgd() -> Self {
        SweepSpec {
            vgs: Range::new(0.0, 0.0, 1.0),
            vds: Range::linspace(0.0, 10.0, 300),
        }
    }

    /// Cgs sweep: Vgs -10..10 V at Vds = 0, 300 points.
    pub fn cgs() -> Self {
        SweepSpec {
            vgs: Range::linspace(-10.0, 10.0, 300),
            vds: Range::new(0.0, 0.0, 1.0),
        }
    }

    /// Named sweep (`standard`, `near-origin`, `cds`, `cgd`, `cgs`) or
    /// `vgs=a:b:s,vds=a:b:s`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => return Ok(Self::standard()),
            "near-origin" => return Ok(Self::near_origin()),
            "cds" => return Ok(Self::cds()),
            "cgd" => return Ok(Self::cgd()),
            "cgs" => return Ok(Self::cgs()),
            _ => {}
        }
        let bad = || Error::Config(format!("cannot parse sweep `{s}`"));
        let mut vgs = None;
        let mut vds = None;
        for part in s.split(',') {
            let (name, spec) = part.split_once('=').ok_or_else(bad)?;
            let nums: Vec<f64> = spec
                .split(':')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad())?;
            let r = match nums[..] {
                [v] => Range::new(v, v, 1.0),
                [a, b, st] => Range::new(a, b, st),
                _ => return Err(bad()),
            };
            match name.trim() {
                "vgs" => vgs = Some(r),
                "vds" => vds = Some(r),
                _ => return Err(bad()),
            }
        }
        let sw = SweepSpec {
            vgs: vgs.ok_or_else(bad)?,
            vds: vds.ok_or_else(bad)?,
        };
        sw.validate()?;
        Ok(sw)
    }

    pub fn validate(&self) -> Result<()> {
        self.vgs.validate("vgs")?;
        self.vds.validate("vds")
    }

    pub fn count(&self) -> usize {
        self.vgs.count() * self.vds.count()
    }

    /// Grid points, Vgs-major.
    pub fn points(&self) -> Vec<BiasPoint> {
        let vds = self.vds.values();
        self.vgs
            .values()
            .into_iter()
            .flat_map(|vgs| vds.iter().map(move |&vds| BiasPoint { vgs, vds }))
            .collect()
    }
}

/// Ground-truth record written next to every synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub model: String,
    pub kind: DatasetKind,
    pub params: IndexMap<String, f64>,
    pub sweeps: Vec<SweepSpec>,
    pub noise_rel: f64,
    pub seed: u64,
    pub points: usize,
    /// Quantities implied by the parameters, e.g. the built-in voltage.
    #[serde(default)]
    pub derived: IndexMap<String, f64>,
}

/// Flattened input rows (one per bias point) in the graph's input order.
/// Graph inputs must be named `Vgs` or `Vds`.
pub fn bias_inputs(graph: &Graph, bias: &[BiasPoint]) -> Result<Vec<f64>> {
    let sel: Vec<bool> = graph
        .input_names()
        .iter()
        .map(|n| match n.as_str() {
            "Vgs" => Ok(true),
            "Vds" => Ok(false),
            _ => Err(Error::Unbound {
                what: "input",
                name: n.clone(),
            }),
        })
        .collect::<Result<_>>()?;
    Ok(bias
        .iter()
        .flat_map(|b| sel.iter().map(move |&g| if g { b.vgs } else { b.vds }))
        .collect())
}

/// Evaluates `graph` (output 0) at every bias point.
pub fn simulate(graph: &Graph, params: &[f64], bias: &[BiasPoint], exec: Exec) -> Result<Vec<f64>> {
    let x = bias_inputs(graph, bias)?;
    let ni = graph.input_names().len();
    let mut out = Vec::with_capacity(bias.len());
    fold_points(
        exec,
        bias.len(),
        Tape::default,
        |tape, j| {
            graph.forward_into(params, &x[j * ni..(j + 1) * ni], tape)?;
            Ok(tape.value(graph.outputs()[0]))
        },
        &mut out,
        |o, v| o.push(v),
    )?;
    Ok(out)
}

fn add_noise(values: &mut [f64], noise_rel: f64, seed: u64) -> Result<()> {
    if !(noise_rel >= 0.0) {
        return Err(Error::Config("noise_rel must be >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in values {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v *= 1.0 + noise_rel * z;
    }
    Ok(())
}

/// Synthetic dataset for the objective of `kind` of a registered model.
pub fn synth_kind(
    model_name: &str,
    kind: DatasetKind,
    params: &IndexMap<String, f64>,
    sweep: &SweepSpec,
    noise_rel: f64,
    seed: u64,
) -> Result<Dataset> {
    let c = PhysicalConstants::default();
    let info = models::model_info(model_name)?;
    info.validate(params)?;
    sweep.validate()?;
    let model = models::build_model(model_name, &c)?;
    let graph = model.graph(kind).ok_or_else(|| {
        Error::Config(format!("model `{model_name}` has no `{kind}` characteristic"))
    })?;
    let p = graph.bind_params(params)?;
    let bias = sweep.points();
    let mut values = simulate(graph, &p, &bias, Exec::Parallel)?;
    add_noise(&mut values, noise_rel, seed)?;
    let points = bias
        .iter()
        .zip(values)
        .map(|(b, value)| Point {
            vgs: b.vgs,
            vds: b.vds,
            value,
        })
        .collect();
    Dataset::new(kind, points, Meta::default())
}

/// Synthetic dataset for a single-characteristic model.
pub fn synth(
    model_name: &str,
    params: &IndexMap<String, f64>,
    sweep: &SweepSpec,
    noise_rel: f64,
    seed: u64,
) -> Result<Dataset> {
    let info = models::model_info(model_name)?;
    if info.kinds.len() != 1 {
        return Err(Error::Config(format!(
            "model `{model_name}` has several characteristics; pick one with synth_kind"
        )));
    }
    synth_kind(model_name, info.kinds[0], params, sweep, noise_rel, seed)
}

/// Gate-source capacitance with a flat-band knee: constant `c0` for
/// `Vgs <= VFBC`, depletion roll-off above it. Only used to exercise the
/// flat-band estimator.
pub fn cgs_curve(vgs: f64, c0: f64, vfbc: f64, tox: f64, na: f64, c: &PhysicalConstants) -> f64 {
    if vgs <= vfbc {
        return c0;
    }
    let cox = c.eps_ox / tox;
    let na_si = na * 1e6;
    c0 / (1.0 + 2.0 * cox * cox * (vgs - vfbc) / (c.q * c.eps_sic * na_si)).sqrt()
}

pub fn synth_cgs(
    c0: f64,
    vfbc: f64,
    tox: f64,
    na: f64,
    sweep: &SweepSpec,
    noise_rel: f64,
    seed: u64,
) -> Result<Dataset> {
    sweep.validate()?;
    let c = PhysicalConstants::default();
    let bias = sweep.points();
    let mut values: Vec<f64> = bias
        .iter()
        .map(|b| cgs_curve(b.vgs, c0, vfbc, tox, na, &c))
        .collect();
    add_noise(&mut values, noise_rel, seed)?;
    let points = bias
        .iter()
        .zip(values)
        .map(|(b, value)| Point {
            vgs: b.vgs,
            vds: b.vds,
            value,
        })
        .collect();
    Dataset::new(DatasetKind::Cgs, points, Meta::default())
}
