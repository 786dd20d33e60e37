//! `feanet`: data generation, kernel inspection, inference and learning.
//!
//! Exit codes: 0 success, 1 invalid input or usage, 2 numerical failure
//! (divergence, singular system, stagnated optimizer).

mod commands;
mod manifest;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use commands::{ExportFormat, Report};

/// Version of the `--json` output envelope.
const JSON_SCHEMA: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "feanet", version, about = "Finite-element convolution operators, Jacobi inference and material identification")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Print a machine-readable JSON summary on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// Worker threads for data-parallel kernels (falls back to FEANET_THREADS).
    #[arg(long, global = true, env = "FEANET_THREADS")]
    pub threads: Option<usize>,
    /// JSON configuration file; flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    pub show_config: bool,
    /// Seed for every random draw.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve random loadings with the sparse reference solver and write a dataset.
    Generate(GenerateArgs),
    /// Print the 3x3 convolution kernel for a physics kind as CSV.
    Kernel(KernelArgs),
    /// Run the Jacobi inference network on a loading image.
    Infer(InferArgs),
    /// Fit a homogeneous filter to a dataset.
    LearnFilter(LearnArgs),
    /// Recover the phase map of a bi-phase dataset with known materials.
    LearnPhase(LearnArgs),
    /// Recover both phases' (E, nu) for a known phase map.
    LearnProps(LearnArgs),
    /// Recover phase map and materials together.
    LearnJoint(LearnArgs),
    /// Print memory footprints of the sparse solver and the network as CSV.
    MemoryReport(MemoryArgs),
    /// Convert a binary image to CSV or PGM.
    Export(ExportArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct MaterialArgs {
    /// Young's modulus in Pa.
    #[arg(long = "E", alias = "e")]
    pub e: Option<f64>,
    /// Poisson ratio.
    #[arg(long)]
    pub nu: Option<f64>,
    /// Thermal conductivity.
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Thermal expansion coefficient.
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Phase1Args {
    /// Young's modulus of phase 1 (outside the inclusion); makes the data bi-phase.
    #[arg(long = "E1", alias = "e1")]
    pub e1: Option<f64>,
    #[arg(long)]
    pub nu1: Option<f64>,
    #[arg(long)]
    pub kappa1: Option<f64>,
    #[arg(long)]
    pub alpha1: Option<f64>,
}

impl From<&Phase1Args> for MaterialArgs {
    fn from(p: &Phase1Args) -> Self {
        Self { e: p.e1, nu: p.nu1, kappa: p.kappa1, alpha: p.alpha1 }
    }
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// thermal, elasticity or thermoelasticity.
    #[arg(long)]
    pub kind: Option<String>,
    /// Nodes per side.
    #[arg(long)]
    pub n: Option<usize>,
    /// Number of samples.
    #[arg(long)]
    pub count: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Random loading with the x channel this multiple of the y channel.
    #[arg(long)]
    pub collinear: Option<f64>,
    /// Inclusion radius in element widths (bi-phase only).
    #[arg(long)]
    pub radius: Option<f64>,
    #[command(flatten)]
    pub material: MaterialArgs,
    #[command(flatten)]
    pub phase1: Phase1Args,
}

#[derive(Args, Debug)]
pub struct KernelArgs {
    #[arg(long)]
    pub kind: Option<String>,
    #[command(flatten)]
    pub material: MaterialArgs,
    /// Also write the CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Dataset manifest (or its directory) supplying loading, material, phase and reference.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Sample index within the dataset.
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
    /// Loading image; overrides the dataset sample.
    #[arg(long)]
    pub v: Option<PathBuf>,
    /// Phase image for bi-phase materials.
    #[arg(long)]
    pub phase: Option<PathBuf>,
    /// Reference response for the error trace.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Number of layers.
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub omega: Option<f64>,
    /// Stop once the relative residual reaches this value.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Record the history every this many layers.
    #[arg(long)]
    pub stride: Option<usize>,
    /// Output directory for the response and history.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write PGM heatmaps of the response.
    #[arg(long)]
    pub pgm: bool,
    #[command(flatten)]
    pub material: MaterialArgs,
}

#[derive(Args, Debug)]
pub struct LearnArgs {
    /// Dataset manifest (or its directory).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory for learned artifacts and reports.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// adam, gradient-descent or line-search.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
}

#[derive(Args, Debug)]
pub struct MemoryArgs {
    /// Nodes per side.
    #[arg(long, default_value_t = 100)]
    pub n: u64,
    /// Restrict to one problem (thermal, elasticity, biphase-elasticity, thermoelasticity).
    #[arg(long)]
    pub problem: Option<String>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub format: ExportFormat,
    /// Channel to render (field images only).
    #[arg(long, default_value_t = 0)]
    pub channel: usize,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Kernel(_) => "kernel",
            Command::Infer(_) => "infer",
            Command::LearnFilter(_) => "learn-filter",
            Command::LearnPhase(_) => "learn-phase",
            Command::LearnProps(_) => "learn-props",
            Command::LearnJoint(_) => "learn-joint",
            Command::MemoryReport(_) => "memory-report",
            Command::Export(_) => "export",
        }
    }
}

fn run(cli: &Cli) -> feanet::Result<Report> {
    let g = &cli.global;
    match &cli.command {
        Command::Generate(a) => commands::generate(a, g),
        Command::Kernel(a) => commands::kernel(a, g),
        Command::Infer(a) => commands::infer_cmd(a, g),
        Command::LearnFilter(a) => commands::learn_filter(a, g),
        Command::LearnPhase(a) => commands::learn_phase(a, g),
        Command::LearnProps(a) => commands::learn_props(a, g),
        Command::LearnJoint(a) => commands::learn_joint(a, g),
        Command::MemoryReport(a) => commands::memory_report(a, g),
        Command::Export(a) => commands::export(a, g),
    }
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(t) = cli.global.threads {
        if t == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let command = cli.command.name();
    let json = cli.global.json;
    let (code, envelope) = match run(&cli) {
        Ok(report) => {
            let code: u8 = if report.failed { 2 } else { 0 };
            if !json {
                emit(&report.text);
            }
            let status = if report.failed { "failed" } else { "ok" };
            (code, json!({ "status": status, "result": report.summary }))
        }
        Err(e) => {
            let code: u8 = if e.is_numerical() { 2 } else { 1 };
            eprintln!("error: {e}");
            (code, json!({ "status": "error", "error": e.to_string() }))
        }
    };
    if json {
        let mut out = json!({ "schema_version": JSON_SCHEMA, "command": command, "exit_code": code });
        if let (Some(o), Some(extra)) = (out.as_object_mut(), envelope.as_object()) {
            o.extend(extra.clone());
        }
        emit(&serde_json::to_string_pretty(&out).expect("JSON values serialize"));
    }
    ExitCode::from(code)
}
