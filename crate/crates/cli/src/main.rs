//! `mosfit`: synthetic data, parameter extraction, gradient checks and
//! benchmarks for the compact models in `mosfit-core`.

mod commands;
mod extract;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "mosfit", version, about = "Compact-model parameter extraction with reverse-mode AD")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset and its ground-truth manifest.
    Synth(SynthArgs),
    /// Fit a model to measured data.
    Extract(ExtractArgs),
    /// Compare AD gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Time AD and ND gradients (and optionally full fits).
    Bench(BenchArgs),
    /// Print graph size statistics for a model.
    Graphinfo(GraphinfoArgs),
    /// Estimate initial surface-potential parameters from data.
    Init(InitArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub model: String,
    /// JSON file mapping parameter names to values; reference values if omitted.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Characteristic to generate (iv, cds, cgd, cgs); required for multi-characteristic models.
    #[arg(long)]
    pub kind: Option<String>,
    /// Named sweep or `vgs=a:b:s,vds=a:b:s`; defaults to the kind's standard sweep.
    #[arg(long)]
    pub sweep: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Accumulation-side Cgs level for `--kind cgs`.
    #[arg(long, default_value_t = 1e-9)]
    pub c0: f64,
    /// Output CSV; the manifest goes next to it as `<stem>.manifest.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerArg {
    GdAdagrad,
    GdPlain,
    Lm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationArg {
    None,
    PerPoint,
}

#[derive(Args, Debug, Clone)]
pub struct ExtractArgs {
    #[arg(long)]
    pub model: String,
    /// `kind=path` (repeatable), or a bare path whose kind is read from the file.
    #[arg(long = "data")]
    pub data: Vec<String>,
    /// Directory of devices: sub-directories holding `<kind>.csv` files, or CSV files.
    #[arg(long)]
    pub batch: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OptimizerArg::GdAdagrad)]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value = "ad")]
    pub engine: String,
    #[arg(long, default_value_t = 1000)]
    pub n_max: usize,
    #[arg(long, default_value_t = 0.0)]
    pub e_target: f64,
    /// `auto`, `random`, or a JSON file of initial values.
    #[arg(long, default_value = "auto")]
    pub init: String,
    /// `NAME=VALUE` (repeatable): supplies or overrides an initial value.
    #[arg(long = "set")]
    pub set: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Built-in voltage for the auto initializer.
    #[arg(long)]
    pub vbi: Option<f64>,
    /// Update rate for `gd-plain`; defaults to |p|/100 per parameter.
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long, value_enum, default_value_t = NormalizationArg::None)]
    pub normalize: NormalizationArg,
    /// Clamp parameters to the model's registry bounds after every update.
    #[arg(long)]
    pub bounded: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub model: String,
    /// `kind=path` (repeatable); synthetic data (2% noise) on the standard sweeps if omitted.
    #[arg(long = "data")]
    pub data: Vec<String>,
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    /// Test fixture: doubles the adjoint of the named operation.
    #[arg(long, hide = true)]
    pub inject_adjoint_fault: Option<String>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Models to time; defaults to nth-power-law and sp-current.
    #[arg(long)]
    pub model: Vec<String>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long, default_value_t = 21)]
    pub reps: usize,
    /// Also run paired AD/ND fits and write their RMSE-vs-time series.
    #[arg(long)]
    pub plot_data: bool,
    #[arg(long, default_value_t = 200)]
    pub n_max: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GraphinfoArgs {
    #[arg(long)]
    pub model: String,
    /// Also print the edge list of every graph.
    #[arg(long)]
    pub edges: bool,
}

#[derive(Args, Debug)]
pub struct InitArgs {
    #[arg(long)]
    pub iv: Option<PathBuf>,
    #[arg(long)]
    pub cds: Option<PathBuf>,
    #[arg(long)]
    pub cgd: Option<PathBuf>,
    #[arg(long)]
    pub cgs: Option<PathBuf>,
    #[arg(long)]
    pub vbi: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Extract(a) => extract::run(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Graphinfo(a) => commands::graphinfo(&a),
        Command::Init(a) => commands::init(&a),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
