use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{Context, Result};
use indexmap::IndexMap;
use serde::Serialize;

use mosfit_core::data::{Dataset, DatasetKind};
use mosfit_core::gradcalc::{Engine, Normalization, Problem};
use mosfit_core::initparams::{estimate_scale, initialize_sp, MeasurementBundle, Provenance};
use mosfit_core::models::{self, PhysicalConstants};
use mosfit_core::optimize::{
    gradient_descent_with, levenberg_marquardt, FitReport, LmOptions, ParamSet, StepRule, StopRule, Termination,
};
use mosfit_core::Exec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::commands::{build_cost, load_data_specs, load_dataset, load_params, usage, write};
use crate::{ExtractArgs, NormalizationArg, OptimizerArg};

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'static str,
    version: &'static str,
    model: &'a str,
    device: &'a str,
    optimizer: OptimizerArg,
    engine: Engine,
    n_max: usize,
    e_target: f64,
    init: &'a str,
    set: &'a [String],
    seed: u64,
    vbi: Option<f64>,
    eta: Option<f64>,
    normalize: NormalizationArg,
    bounded: bool,
    data: IndexMap<String, String>,
    init_params: &'a IndexMap<String, f64>,
}

struct Device {
    name: String,
    /// (path, dataset)
    data: Vec<(PathBuf, Dataset)>,
}

pub fn run(a: &ExtractArgs) -> Result<u8> {
    models::model_info(&a.model)?;
    let _: Engine = a.engine.parse()?;
    match &a.batch {
        Some(dir) => {
            if !a.data.is_empty() {
                return Err(usage("use either --data or --batch"));
            }
            run_batch(a, dir)
        }
        None => {
            if a.data.is_empty() {
                return Err(usage("extract needs --data (or --batch)"));
            }
            let datasets = load_data_specs(&a.data)?;
            let paths: Vec<PathBuf> = a
                .data
                .iter()
                .map(|s| PathBuf::from(s.split_once('=').map(|(_, p)| p).unwrap_or(s)))
                .collect();
            let data = datasets
                .into_iter()
                .map(|d| {
                    let p = paths
                        .iter()
                        .find(|p| load_dataset(p).map(|x| x.kind == d.kind).unwrap_or(false))
                        .cloned()
                        .unwrap_or_default();
                    (p, d)
                })
                .collect();
            let dev = Device {
                name: "device".into(),
                data,
            };
            let (code, summary) = fit_device(a, &dev, &a.out, Exec::Parallel)?;
            println!("{summary}");
            Ok(code)
        }
    }
}

fn batch_devices(dir: &Path) -> Result<Vec<Device>> {
    if !dir.is_dir() {
        return Err(usage(format!("batch directory {} does not exist", dir.display())));
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    let mut devices = Vec::new();
    for p in entries {
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(&p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<Vec<_>>>()?
                .into_iter()
                .filter(|f| f.extension().is_some_and(|x| x == "csv"))
                .collect();
            files.sort();
            let data = files
                .into_iter()
                .map(|f| load_dataset(&f).map(|d| (f, d)))
                .collect::<Result<Vec<_>>>()?;
            if !data.is_empty() {
                devices.push(Device { name, data });
            }
        } else if p.extension().is_some_and(|x| x == "csv") {
            let d = load_dataset(&p)?;
            devices.push(Device {
                name,
                data: vec![(p, d)],
            });
        }
    }
    if devices.is_empty() {
        return Err(usage(format!("no devices found in {}", dir.display())));
    }
    Ok(devices)
}

/// Fits every device; at most `MOSFIT_THREADS` (default 1) fits run at once
/// and each fit runs on one thread.
fn run_batch(a: &ExtractArgs, dir: &Path) -> Result<u8> {
    let devices = batch_devices(dir)?;
    let threads = match std::env::var("MOSFIT_THREADS") {
        Ok(s) => s
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n >= 1)
            .ok_or_else(|| usage(format!("MOSFIT_THREADS must be a positive integer, got `{s}`")))?,
        Err(_) => 1,
    };
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<(u8, String)>)>> = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..threads.min(devices.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(dev) = devices.get(i) else { break };
                let r = fit_device(a, dev, &a.out.join(&dev.name), Exec::Sequential);
                results.lock().expect("poisoned").push((i, r));
            });
        }
    });
    let mut results = results.into_inner().expect("poisoned");
    results.sort_by_key(|r| r.0);
    let mut code = 0;
    for (i, r) in results {
        match r {
            Ok((c, summary)) => {
                println!("{}: {summary}", devices[i].name);
                code = code.max(c);
            }
            Err(e) => {
                eprintln!("{}: error: {e:#}", devices[i].name);
                code = code.max(crate::commands::exit_code(&e));
            }
        }
    }
    Ok(code)
}

fn random_init(model: &str, seed: u64) -> Result<IndexMap<String, f64>> {
    let info = models::model_info(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(info
        .params
        .iter()
        .map(|d| {
            let v = if d.lo > 0.0 {
                (rng.random_range(d.lo.ln()..d.hi.ln())).exp()
            } else {
                rng.random_range(d.lo..d.hi)
            };
            (d.name.to_string(), v)
        })
        .collect())
}

fn overrides(a: &ExtractArgs) -> Result<IndexMap<String, f64>> {
    a.set
        .iter()
        .map(|s| {
            let (n, v) = s
                .split_once('=')
                .ok_or_else(|| usage(format!("--set expects NAME=VALUE, got `{s}`")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| usage(format!("--set {n}: `{v}` is not a number")))?;
            Ok((n.trim().to_string(), v))
        })
        .collect()
}

fn initial_values(a: &ExtractArgs, datasets: &[Dataset]) -> Result<IndexMap<String, f64>> {
    let set = overrides(a)?;
    let mut p = match a.init.as_str() {
        "random" => random_init(&a.model, a.seed)?,
        "auto" if a.model == "nth-power-law" => random_init(&a.model, a.seed)?,
        "auto" => {
            let get = |k: DatasetKind| datasets.iter().find(|d| d.kind == k).cloned();
            let bundle = MeasurementBundle {
                iv: get(DatasetKind::Iv),
                cds: get(DatasetKind::Cds),
                cgd: get(DatasetKind::Cgd),
                cgs: get(DatasetKind::Cgs),
            };
            let c = PhysicalConstants::default();
            let mut est = initialize_sp(&bundle, a.vbi, &c)?;
            for (n, v) in &set {
                est.set(n, *v, Provenance::Supplied);
            }
            if let (Some(iv), false) = (&bundle.iv, est.params.contains_key("SCALE")) {
                if let Ok(scale) = estimate_scale(iv, &est.params, &c) {
                    est.set("SCALE", scale, Provenance::DerivedEquation);
                }
            }
            est.for_model(&a.model).map_err(|e| {
                usage(format!(
                    "auto init cannot determine all parameters ({e}); still missing: {} (supply them with --set)",
                    est.missing().join(", ")
                ))
            })?
        }
        file => load_params(Path::new(file))?,
    };
    p.extend(set);
    models::model_info(&a.model)?.validate(&p)?;
    Ok(p)
}

fn fit_device(a: &ExtractArgs, dev: &Device, out: &Path, exec: Exec) -> Result<(u8, String)> {
    let engine: Engine = a.engine.parse()?;
    let datasets: Vec<Dataset> = dev.data.iter().map(|d| d.1.clone()).collect();
    let normalization = match a.normalize {
        NormalizationArg::None => Normalization::None,
        NormalizationArg::PerPoint => Normalization::PerPoint,
    };
    let init = initial_values(a, &datasets)?;
    let problem = build_cost(&a.model, &datasets, &init, normalization)?.with_exec(exec);

    let mut ps = ParamSet::new(init.clone());
    if let Some(eta) = a.eta {
        if !(eta > 0.0) {
            return Err(usage("--eta must be > 0"));
        }
        ps = ps.with_uniform_eta(eta);
    }
    if a.bounded {
        ps = ps.with_bounds(models::model_info(&a.model)?.bounds());
    }
    let stop = StopRule::new(a.n_max, a.e_target);
    let report = match a.optimizer {
        OptimizerArg::GdAdagrad => gradient_descent_with(&problem, &ps, &stop, engine, StepRule::default())?,
        OptimizerArg::GdPlain => gradient_descent_with(&problem, &ps, &stop, engine, StepRule::Plain)?,
        OptimizerArg::Lm => levenberg_marquardt(&problem, &ps, &stop, engine, &LmOptions::default())?,
    };
    write_outputs(a, dev, out, &problem, &report, &init, engine)?;
    let code = if report.terminated_by == Termination::Error { 2 } else { 0 };
    let mut summary = format!(
        "{} with {}: {} updates, final cost {:.6e}, terminated by {:?}, outputs in {}",
        report.optimizer,
        engine,
        report.updates,
        report.final_cost,
        report.terminated_by,
        out.display()
    );
    if let Some(e) = &report.error {
        summary.push_str(&format!("; error: {e}"));
    }
    Ok((code, summary))
}

fn write_outputs(
    a: &ExtractArgs,
    dev: &Device,
    out: &Path,
    problem: &Problem,
    report: &FitReport,
    init: &IndexMap<String, f64>,
    engine: Engine,
) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("fit_report.json"), &report.to_json()?)?;
    let params = serde_json::json!({ "model": a.model, "params": report.final_params });
    write(&out.join("params.json"), &serde_json::to_string_pretty(&params)?)?;
    write(&out.join("convergence.csv"), &report.convergence_csv())?;

    if let Ok(p) = problem.vector(&report.final_params) {
        for k in 0..problem.n_objectives() {
            let kind = problem.objective_kind(k);
            let Some((_, ds)) = dev.data.iter().find(|d| d.1.kind == kind) else { continue };
            let mut s = String::from("vgs,vds,measured,simulated\n");
            // a failed final simulation leaves the curve file out
            if let Ok(sim) = problem.simulate(k, &p) {
                for (pt, v) in ds.points().iter().zip(sim) {
                    s.push_str(&format!("{:.16e},{:.16e},{:.16e},{:.16e}\n", pt.vgs, pt.vds, pt.value, v));
                }
                write(&out.join(format!("curves_{kind}.csv")), &s)?;
            }
        }
    }

    let manifest = Manifest {
        command: "extract",
        version: env!("CARGO_PKG_VERSION"),
        model: &a.model,
        device: &dev.name,
        optimizer: a.optimizer,
        engine,
        n_max: a.n_max,
        e_target: a.e_target,
        init: &a.init,
        set: &a.set,
        seed: a.seed,
        vbi: a.vbi,
        eta: a.eta,
        normalize: a.normalize,
        bounded: a.bounded,
        data: dev
            .data
            .iter()
            .map(|(p, d)| (d.kind.to_string(), p.display().to_string()))
            .collect(),
        init_params: init,
    };
    write(&out.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}
