use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use indexmap::IndexMap;
use serde::Serialize;

use mosfit_core::bench::{bench_extraction, bench_gradient, to_csv, BenchResult, Optimizer};
use mosfit_core::data::{synth_cgs, synth_kind, Dataset, DatasetKind, SweepSpec, SynthManifest};
use mosfit_core::gradcalc::{CostSpec, Normalization, ObjectiveSpec, Problem};
use mosfit_core::initparams::{initialize_sp, MeasurementBundle};
use mosfit_core::models::{self, surface, PhysicalConstants};
use mosfit_core::optimize::{ParamSet, StopRule};
use mosfit_core::Error as CoreError;

use crate::{BenchArgs, GradcheckArgs, GraphinfoArgs, InitArgs, SynthArgs};

/// Bad flags, inputs or configuration (exit code 1).
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

/// 1 for usage and configuration problems, 2 for everything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 1;
        }
        if let Some(ce) = cause.downcast_ref::<CoreError>() {
            return match ce {
                CoreError::UnknownModel { .. }
                | CoreError::MissingParam(_)
                | CoreError::UnknownParam(_)
                | CoreError::InvalidParam { .. }
                | CoreError::Config(_)
                | CoreError::Parse { .. }
                | CoreError::InvalidDataset(_)
                | CoreError::Csv(_)
                | CoreError::Json(_)
                | CoreError::Io(_) => 1,
                _ => 2,
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() || cause.downcast_ref::<std::io::Error>().is_some() {
            return 1;
        }
    }
    2
}

pub fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Parameter JSON: either a flat name→value map or an object with a
/// `params` map (as written by `init` and `extract`).
pub fn load_params(path: &Path) -> Result<IndexMap<String, f64>> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("reading {}: {e}", path.display())))?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| usage(format!("parsing {}: {e}", path.display())))?;
    let obj = match v.get("params") {
        Some(p) if p.is_object() => p.clone(),
        _ => v,
    };
    serde_json::from_value(obj).map_err(|e| usage(format!("{}: expected a map of numbers: {e}", path.display())))
}

pub fn model_params(model: &str, file: Option<&Path>) -> Result<IndexMap<String, f64>> {
    let info = models::model_info(model)?;
    let p = match file {
        Some(f) => load_params(f)?,
        None => models::reference_params(model, &PhysicalConstants::default())?,
    };
    info.validate(&p)?;
    // reorder to the declared order
    Ok(info.params.iter().map(|d| (d.name.to_string(), p[d.name])).collect())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(usage(format!("data file {} does not exist", path.display())));
    }
    Dataset::load_csv(path).with_context(|| format!("loading {}", path.display()))
}

/// `kind=path` or a bare path.
pub fn load_data_specs(specs: &[String]) -> Result<Vec<Dataset>> {
    let mut out: Vec<Dataset> = Vec::new();
    for s in specs {
        let (kind, path) = match s.split_once('=') {
            Some((k, p)) => (Some(k.parse::<DatasetKind>()?), PathBuf::from(p)),
            None => (None, PathBuf::from(s)),
        };
        let ds = load_dataset(&path)?;
        if let Some(k) = kind {
            if ds.kind != k {
                return Err(usage(format!("{} holds {} data, not {k}", path.display(), ds.kind)));
            }
        }
        if let Some(prev) = out.iter_mut().find(|d| d.kind == ds.kind) {
            *prev = prev.merged(&ds)?;
        } else {
            out.push(ds);
        }
    }
    Ok(out)
}

fn default_sweep(kind: DatasetKind) -> SweepSpec {
    match kind {
        DatasetKind::Iv => SweepSpec::standard(),
        DatasetKind::Cds => SweepSpec::cds(),
        DatasetKind::Cgd => SweepSpec::cgd(),
        DatasetKind::Cgs => SweepSpec::cgs(),
    }
}

pub fn synth(a: &SynthArgs) -> Result<u8> {
    let info = models::model_info(&a.model)?;
    let kind = match &a.kind {
        Some(k) => k.parse::<DatasetKind>()?,
        None if info.kinds.len() == 1 => info.kinds[0],
        None => {
            return Err(usage(format!(
                "model `{}` has several characteristics; pass --kind",
                a.model
            )))
        }
    };
    let sweep = match &a.sweep {
        Some(s) => SweepSpec::parse(s)?,
        None => default_sweep(kind),
    };
    let params = model_params(&a.model, a.params.as_deref())?;
    let c = PhysicalConstants::default();
    let mut derived = IndexMap::new();
    let ds = if kind == DatasetKind::Cgs {
        let need = |n: &str| {
            params
                .get(n)
                .copied()
                .ok_or_else(|| usage(format!("--kind cgs needs parameter `{n}`, which `{}` lacks", a.model)))
        };
        derived.insert("C0".into(), a.c0);
        synth_cgs(a.c0, need("VFBC")?, need("TOX")?, need("NA")?, &sweep, a.noise, a.seed)?
    } else {
        synth_kind(&a.model, kind, &params, &sweep, a.noise, a.seed)?
    };
    if let (Some(na), Some(nd)) = (params.get("NA"), params.get("ND")) {
        derived.insert("VBI".into(), surface::vbi_from_doping(*na, *nd, &c));
    }
    write(&a.out, &ds.to_csv_string())?;
    let manifest = SynthManifest {
        model: a.model.clone(),
        kind,
        params,
        sweeps: vec![sweep],
        noise_rel: a.noise,
        seed: a.seed,
        points: ds.len(),
        derived,
    };
    let mpath = manifest_path(&a.out);
    write(&mpath, &serde_json::to_string_pretty(&manifest)?)?;
    println!("wrote {} ({} points) and {}", a.out.display(), ds.len(), mpath.display());
    Ok(0)
}

fn manifest_path(csv: &Path) -> PathBuf {
    let stem = csv.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    csv.with_file_name(format!("{stem}.manifest.json"))
}

/// Cost over every characteristic of `model`, reading or synthesizing data.
pub fn build_cost(
    model: &str,
    datasets: &[Dataset],
    params_for_synth: &IndexMap<String, f64>,
    normalization: Normalization,
) -> Result<Problem> {
    let info = models::model_info(model)?;
    let m = models::build_model(model, &PhysicalConstants::default())?;
    let mut objectives = Vec::new();
    for &kind in info.kinds {
        let ds = match datasets.iter().find(|d| d.kind == kind) {
            Some(d) => d.clone(),
            None if datasets.is_empty() => synth_kind(model, kind, params_for_synth, &default_sweep(kind), 0.0, 0)?,
            None => return Err(usage(format!("model `{model}` needs {kind} data"))),
        };
        objectives.push(ObjectiveSpec::new(m.graph(kind).expect("registry kinds").clone(), ds));
    }
    for d in datasets {
        if !info.kinds.contains(&d.kind) && d.kind != DatasetKind::Cgs {
            return Err(usage(format!("model `{model}` does not use {} data", d.kind)));
        }
    }
    let mut pr = Problem::new(&CostSpec {
        normalization,
        objectives,
    })?;
    if info.kinds.len() > 1 {
        pr.scale_by_data();
    }
    Ok(pr)
}

#[derive(Serialize)]
struct GradcheckRow {
    name: String,
    ad: f64,
    fd: f64,
    rel_err: f64,
    pass: bool,
}

/// Central differences with step `1e-5·|p|`; errors are compared in
/// sensitivity units `p·∂E/∂p` with a floor of `1e-6·E`.
pub fn gradcheck(a: &GradcheckArgs) -> Result<u8> {
    let params = model_params(&a.model, a.params.as_deref())?;
    let mut datasets = load_data_specs(&a.data)?;
    if datasets.is_empty() {
        // noisy so the cost is not at its non-differentiable zero
        for &kind in models::model_info(&a.model)?.kinds {
            datasets.push(synth_kind(&a.model, kind, &params, &default_sweep(kind), 0.02, 0)?);
        }
    }
    let mut pr = build_cost(&a.model, &datasets, &params, Normalization::None)?;
    if let Some(op) = &a.inject_adjoint_fault {
        pr = faulty(&a.model, op, &datasets, &params)?;
    }
    let p = pr.vector(&params)?;
    let ad = pr.ad_gradient(&p)?;
    let e = ad.cost;
    let mut rows = Vec::new();
    for (i, name) in pr.names().iter().enumerate() {
        let h = if p[i] == 0.0 { 1e-6 } else { 1e-7 * p[i].abs() };
        let mut q = p.clone();
        q[i] = p[i] + h;
        let cp = pr.cost(&q)?;
        q[i] = p[i] - h;
        let cm = pr.cost(&q)?;
        let fd = (cp - cm) / (2.0 * h);
        let g = ad.grad.values()[i];
        let s = if p[i] == 0.0 { 1.0 } else { p[i].abs() };
        let floor = 1e-6 * e;
        let denom = (fd * s).abs().max(floor);
        let rel = if denom == 0.0 { 0.0 } else { ((g - fd) * s).abs() / denom };
        rows.push(GradcheckRow {
            name: name.clone(),
            ad: g,
            fd,
            rel_err: rel,
            pass: rel <= a.tol,
        });
    }
    println!("{:<8} {:>16} {:>16} {:>10}", "param", "ad", "central_fd", "rel_err");
    for r in &rows {
        println!(
            "{:<8} {:>16.8e} {:>16.8e} {:>10.2e} {}",
            r.name,
            r.ad,
            r.fd,
            r.rel_err,
            if r.pass { "ok" } else { "FAIL" }
        );
    }
    let ok = rows.iter().all(|r| r.pass);
    println!("cost {e:.6e}; {}", if ok { "all within tolerance" } else { "gradient check failed" });
    Ok(if ok { 0 } else { 2 })
}

fn faulty(model: &str, op: &str, datasets: &[Dataset], params: &IndexMap<String, f64>) -> Result<Problem> {
    let info = models::model_info(model)?;
    let m = models::build_model(model, &PhysicalConstants::default())?;
    let mut objectives = Vec::new();
    for &kind in info.kinds {
        let g = m.graph(kind).expect("registry kinds").with_corrupted_adjoint(op)?;
        let ds = match datasets.iter().find(|d| d.kind == kind) {
            Some(d) => d.clone(),
            None => synth_kind(model, kind, params, &default_sweep(kind), 0.0, 0)?,
        };
        objectives.push(ObjectiveSpec::new(g, ds));
    }
    Ok(Problem::new(&CostSpec {
        normalization: Normalization::None,
        objectives,
    })?)
}

pub fn bench(a: &BenchArgs) -> Result<u8> {
    let names: Vec<String> = if a.model.is_empty() {
        vec!["nth-power-law".into(), "sp-current".into()]
    } else {
        a.model.clone()
    };
    if a.data.is_some() && names.len() != 1 {
        return Err(usage("--data needs exactly one --model"));
    }
    let mut rows: Vec<BenchResult> = Vec::new();
    for model in &names {
        let info = models::model_info(model)?;
        if info.kinds.len() != 1 {
            return Err(usage(format!("bench takes single-characteristic models; `{model}` is not")));
        }
        let params = model_params(model, a.params.as_deref())?;
        let ds = match &a.data {
            Some(p) => load_dataset(p)?,
            None => synth_kind(model, info.kinds[0], &params, &default_sweep(info.kinds[0]), 0.0, 0)?,
        };
        rows.extend(bench_gradient(model, &params, &ds, a.reps)?);
        if a.plot_data {
            let init = ParamSet::new(perturb(&params));
            let (ad, nd) = bench_extraction(model, Optimizer::GdAdaGrad, &init, &ds, &StopRule::new(a.n_max, 0.0))?;
            if let Some(dir) = &a.out {
                write(&dir.join(format!("{model}_convergence_ad.csv")), &ad.convergence_csv())?;
                write(&dir.join(format!("{model}_convergence_nd.csv")), &nd.convergence_csv())?;
            }
            println!(
                "{model}: fit AD {:.3} s (final {:.3e}), ND {:.3} s (final {:.3e})",
                ad.elapsed_seconds, ad.final_cost, nd.elapsed_seconds, nd.final_cost
            );
        }
    }
    let csv = to_csv(&rows);
    print!("{csv}");
    if let Some(dir) = &a.out {
        write(&dir.join("bench.csv"), &csv)?;
        write(&dir.join("bench.json"), &serde_json::to_string_pretty(&rows)?)?;
    }
    Ok(0)
}

/// Fixed +10% offset on every parameter, the starting point of the paired
/// bench fits.
fn perturb(p: &IndexMap<String, f64>) -> IndexMap<String, f64> {
    p.iter().map(|(k, v)| (k.clone(), v * 1.1)).collect()
}

#[derive(Serialize)]
struct GraphSummary {
    kind: DatasetKind,
    vertices: usize,
    edges: usize,
    interior: usize,
    params: Vec<String>,
    inputs: Vec<String>,
}

#[derive(Serialize)]
struct GraphInfo {
    model: String,
    build_seconds: f64,
    graphs: Vec<GraphSummary>,
}

pub fn graphinfo(a: &GraphinfoArgs) -> Result<u8> {
    let c = PhysicalConstants::default();
    models::model_info(&a.model)?;
    let t = Instant::now();
    let m = models::build_model(&a.model, &c)?;
    let build_seconds = t.elapsed().as_secs_f64();
    let graphs = m
        .objectives
        .iter()
        .map(|(k, g)| {
            let s = g.stats();
            GraphSummary {
                kind: *k,
                vertices: s.vertices,
                edges: s.edges,
                interior: g.interior_count(),
                params: g.param_names().to_vec(),
                inputs: g.input_names().to_vec(),
            }
        })
        .collect();
    let info = GraphInfo {
        model: a.model.clone(),
        build_seconds,
        graphs,
    };
    println!("{}", serde_json::to_string_pretty(&info)?);
    if a.edges {
        for (k, g) in &m.objectives {
            println!("# {k}");
            print!("{}", g.dump_edges());
        }
    }
    Ok(0)
}

pub fn init(a: &InitArgs) -> Result<u8> {
    let load = |p: &Option<PathBuf>, kind: DatasetKind| -> Result<Option<Dataset>> {
        match p {
            None => Ok(None),
            Some(p) => {
                let d = load_dataset(p)?;
                if d.kind != kind {
                    bail!(usage(format!("{} holds {} data, expected {kind}", p.display(), d.kind)));
                }
                Ok(Some(d))
            }
        }
    };
    let bundle = MeasurementBundle {
        iv: load(&a.iv, DatasetKind::Iv)?,
        cds: load(&a.cds, DatasetKind::Cds)?,
        cgd: load(&a.cgd, DatasetKind::Cgd)?,
        cgs: load(&a.cgs, DatasetKind::Cgs)?,
    };
    if bundle.iv.is_none() && bundle.cds.is_none() && bundle.cgd.is_none() && bundle.cgs.is_none() {
        return Err(usage("init needs at least one of --iv, --cds, --cgd, --cgs"));
    }
    let est = initialize_sp(&bundle, a.vbi, &PhysicalConstants::default())?;
    let json = serde_json::to_string_pretty(&est)?;
    match &a.out {
        Some(p) => write(p, &json)?,
        None => println!("{json}"),
    }
    let missing = est.missing();
    if !missing.is_empty() {
        eprintln!("requires user input: {}", missing.join(", "));
    }
    Ok(0)
}
