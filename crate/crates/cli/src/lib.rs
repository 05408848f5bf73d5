//! Command-line front end for `sdm-core`.
//!
//! Exit codes: 0 success, 1 error, 2 a run diverged.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use sdm_core::algorithms::{convergence_bound, BoundForm, BoundInputs};
use sdm_core::graph::{build_consensus_matrix, Topology};
use sdm_core::privacy::{
    alternative_design_epsilon, calibrate_sigma, max_iterations, sdm_dsgd_epsilon, Accounting, AlphaRule, PrivacyParams,
};
use sdm_core::simulator::{self, status_name, write_sweep_csv, RunConfig, RunMetrics, RunStatus, TopologySpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "sdm", version, about = "Decentralized SGD simulator with differential-privacy accounting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Configuration file (TOML).
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long, value_name = "DIR", env = "SDM_OUT")]
    pub out: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, value_name = "U64", env = "SDM_SEED")]
    pub seed: Option<u64>,
    /// Suppress informational output.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one simulation and write metrics.csv and manifest.toml.
    Run(CommonArgs),
    /// Run every entry of a sweep file and write sweep.csv.
    Sweep(CommonArgs),
    /// Calibrate the noise variance and print the epsilon curve.
    Calibrate(CommonArgs),
    /// Print spectral properties of a topology.
    Graph(CommonArgs),
    /// Evaluate the convergence bound.
    Bound(CommonArgs),
}

/// Metadata written next to the metrics of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub code_version: String,
    pub status: String,
    pub seed: u64,
    pub iterations_run: u64,
    pub min_grad_norm_sq: f64,
    #[serde(default)]
    pub warnings: Vec<String>,
    pub config: RunConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepFile {
    pub schema_version: u32,
    pub runs: Vec<SweepEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    pub id: String,
    pub config: RunConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateFile {
    pub iterations: u64,
    pub local_samples_m: u64,
    pub transmit_prob_p: f64,
    pub sensitivity_g: f64,
    pub delta: f64,
    pub epsilon_target: f64,
    #[serde(default)]
    pub alpha_rule: AlphaRule,
    #[serde(default)]
    pub accounting: Accounting,
    /// Iteration counts for the epsilon curve; ten evenly spaced points up to
    /// `iterations` when absent.
    #[serde(default)]
    pub curve: Option<Vec<u64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFile {
    #[serde(default)]
    pub seed: u64,
    pub topology: TopologySpec,
}

#[derive(Debug, Deserialize)]
pub struct BoundFile {
    #[serde(default)]
    pub form: BoundForm,
    #[serde(flatten)]
    pub inputs: BoundInputs,
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read config file {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("cannot parse config file {}", path.display()))
}

/// Reads a run configuration and makes its file references relative to the
/// config's directory.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let mut cfg: RunConfig = read_toml(path)?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(cfg)
}

fn out_dir(args: &CommonArgs) -> Result<PathBuf> {
    let dir = args.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
    Ok(dir)
}

/// Parses `args` and executes the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_ERROR
        }
    }
}

pub fn execute(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Sweep(args) => cmd_sweep(&args),
        Command::Calibrate(args) => cmd_calibrate(&args),
        Command::Graph(args) => cmd_graph(&args),
        Command::Bound(args) => cmd_bound(&args),
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

pub fn cmd_run(args: &CommonArgs) -> Result<i32> {
    let mut config = load_run_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let dir = out_dir(args)?;
    let metrics = simulator::run(config.clone()).context("run failed")?;
    for w in &metrics.warnings {
        if !args.quiet {
            eprintln!("warning: {w}");
        }
    }
    let mut csv = Vec::new();
    metrics.write_csv(&mut csv)?;
    write_file(&dir.join("metrics.csv"), &csv)?;
    let manifest = Manifest {
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        status: status_name(metrics.status).to_string(),
        seed: config.seed,
        iterations_run: metrics.iterations_run,
        min_grad_norm_sq: metrics.min_grad_norm_sq,
        warnings: metrics.warnings.clone(),
        config,
    };
    write_file(&dir.join("manifest.toml"), toml::to_string(&manifest)?.as_bytes())?;
    if !args.quiet {
        print_summary(&metrics);
    }
    Ok(match metrics.status {
        RunStatus::Diverged => EXIT_DIVERGED,
        _ => EXIT_OK,
    })
}

fn print_summary(m: &RunMetrics) {
    println!("status: {}", status_name(m.status));
    println!("iterations: {}", m.iterations_run);
    println!("min grad_norm_sq: {:e}", m.min_grad_norm_sq);
    if let Some(last) = m.last() {
        println!("final loss: {:e}", last.loss);
        println!("final consensus_err: {:e}", last.consensus_err);
        println!("cum_nnz: {}", last.cum_nnz);
        if let Some(e) = last.cum_epsilon {
            println!("cum_epsilon: {e}");
        }
    }
}

pub fn cmd_sweep(args: &CommonArgs) -> Result<i32> {
    let mut file: SweepFile = read_toml(&args.config)?;
    if file.schema_version != simulator::SCHEMA_VERSION {
        bail!("sweep schema_version {} is not supported", file.schema_version);
    }
    let base = args.config.parent().unwrap_or(Path::new("."));
    for entry in &mut file.runs {
        entry.config.resolve_paths(base);
        if let Some(seed) = args.seed {
            entry.config.seed = seed;
        }
    }
    let dir = out_dir(args)?;
    let configs: Vec<RunConfig> = file.runs.iter().map(|e| e.config.clone()).collect();
    let results = simulator::sweep(&configs);
    let mut ok = Vec::new();
    let mut failed = false;
    for (entry, result) in file.runs.iter().zip(&results) {
        match result {
            Ok(m) => {
                if !args.quiet {
                    println!("{}: {} after {} iterations", entry.id, status_name(m.status), m.iterations_run);
                }
                ok.push((entry.id.as_str(), m));
            }
            Err(e) => {
                failed = true;
                eprintln!("error: run {}: {e}", entry.id);
            }
        }
    }
    let mut csv = Vec::new();
    write_sweep_csv(&mut csv, ok)?;
    write_file(&dir.join("sweep.csv"), &csv)?;
    Ok(if failed { EXIT_ERROR } else { EXIT_OK })
}

pub fn cmd_calibrate(args: &CommonArgs) -> Result<i32> {
    let file: CalibrateFile = read_toml(&args.config)?;
    let params = PrivacyParams {
        sigma2: 1.0,
        tau: 1.0 / file.local_samples_m.max(1) as f64,
        sensitivity_g: file.sensitivity_g,
        local_samples_m: file.local_samples_m,
        transmit_prob_p: file.transmit_prob_p,
        delta: file.delta,
        epsilon_target: file.epsilon_target,
        alpha_rule: file.alpha_rule,
        accounting: file.accounting,
    };
    let cal = calibrate_sigma(&params, file.iterations)?;
    let calibrated = cal.apply(&params);
    let mut out = String::new();
    out.push_str(&format!("sigma2: {}\n", cal.sigma2));
    out.push_str(&format!("valid: {}\n", cal.is_valid()));
    out.push_str(&format!("alpha: {}\n", params.alpha()?));
    if params.sensitivity_g > 0.0 {
        out.push_str(&format!("max_iterations: {}\n", max_iterations(&params)?));
    }
    let curve = file
        .curve
        .unwrap_or_else(|| (1..=10).map(|k| (file.iterations * k / 10).max(1)).collect());
    let mut table = String::from("T,epsilon_sdm,epsilon_alternative\n");
    if cal.is_valid() {
        for t in curve {
            let a = sdm_dsgd_epsilon(&calibrated, t)?.epsilon;
            let b = alternative_design_epsilon(&calibrated, t)?.epsilon;
            table.push_str(&format!("{t},{a},{b}\n"));
        }
    }
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(out.as_bytes())?;
    stdout.write_all(table.as_bytes())?;
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        write_file(&dir.join("epsilon_curve.csv"), table.as_bytes())?;
    }
    Ok(EXIT_OK)
}

pub fn cmd_graph(args: &CommonArgs) -> Result<i32> {
    let is_toml = args.config.extension().is_some_and(|e| e == "toml");
    let topology = if is_toml {
        let file: GraphFile = read_toml(&args.config)?;
        let mut spec = file.topology;
        if let TopologySpec::EdgeList { path } = &mut spec {
            if path.is_relative() {
                *path = args.config.parent().unwrap_or(Path::new(".")).join(&*path);
            }
        }
        spec.build(args.seed.unwrap_or(file.seed))?
    } else {
        Topology::read_edge_list(&args.config).with_context(|| format!("cannot load edge list {}", args.config.display()))?
    };
    let w = build_consensus_matrix(&topology);
    let s = w.spectral();
    println!("nodes: {}", topology.node_count());
    println!("edges: {}", topology.edge_count());
    println!("beta: {}", s.beta);
    println!("lambda_2: {}", s.lambda_2().unwrap_or(f64::NAN));
    println!("lambda_min: {}", s.lambda_min);
    println!("lambda_max: {}", s.lambda_max());
    println!("spectral_gap: {}", s.spectral_gap());
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        write_file(&dir.join("edges.txt"), topology.to_edge_list().as_bytes())?;
    }
    Ok(EXIT_OK)
}

pub fn cmd_bound(args: &CommonArgs) -> Result<i32> {
    let file: BoundFile = read_toml(&args.config)?;
    let b = convergence_bound(&file.inputs, file.form)?;
    println!("term_i: {}", b.term_i);
    println!("term_ii: {}", b.term_ii);
    println!("term_iii: {}", b.term_iii);
    println!("term_iv: {}", b.term_iv);
    println!("total: {}", b.total);
    Ok(EXIT_OK)
}
