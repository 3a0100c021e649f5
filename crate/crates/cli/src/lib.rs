//! Command-line front end for `crtgee`.
//!
//! Exit codes: 0 success, 1 input or configuration error, 2 some method did
//! not converge (the report is still written), 3 numerical failure.

pub mod analyze;
pub mod config;
pub mod simulate;

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use crtgee::simgen::{compute_true_delta_sized, scenario, SimConfig, TRUTH_CLUSTERS, TRUTH_MEAN_SIZE};
use crtgee::simulation::with_workers;
use crtgee::ClusterDataset;

use crate::config::{parse_methods, StudyConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "crtgee",
    version,
    about = "Covariate-adjusted odds ratios for cluster-randomized trials"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the treatment effect on a trial CSV.
    Analyze(AnalyzeArgs),
    /// Run a simulation study described by a config file.
    Simulate(SimulateArgs),
    /// Evaluate the population truth for a scenario.
    Truth(TruthArgs),
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// CSV with columns cluster_id, treatment, outcome and any covariates.
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated subset of crude, multi, ipw_logit, ow_logit.
    #[arg(long, value_delimiter = ',', default_value = "crude")]
    pub methods: Vec<String>,
    /// Covariates to adjust for (default: every non-key column).
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    /// Directory for effects.csv, balance.csv and summary.json. Without it the
    /// tables go to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Worker threads; overrides the config file.
    #[arg(long, env = "CRTGEE_WORKERS")]
    pub workers: Option<usize>,
    /// Output directory; overrides `output` in the config file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TruthArgs {
    /// Reference scenario key, e.g. model1-low-p6.
    #[arg(long)]
    pub scenario: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.01)]
    pub icc: f64,
    /// Replace the scenario's treatment coefficient.
    #[arg(long, allow_hyphen_values = true)]
    pub beta_z: Option<f64>,
    /// Replace the scenario's intercept.
    #[arg(long, allow_hyphen_values = true)]
    pub beta0: Option<f64>,
    #[arg(long, default_value_t = TRUTH_CLUSTERS)]
    pub clusters: usize,
    #[arg(long, default_value_t = TRUTH_MEAN_SIZE)]
    pub mean_size: usize,
    #[arg(long, env = "CRTGEE_WORKERS")]
    pub workers: Option<usize>,
    /// Print JSON instead of key: value lines.
    #[arg(long)]
    pub json: bool,
}

/// Formats a number for the CSV reports; undefined values become `NA`.
pub fn na(x: Option<f64>) -> String {
    match x {
        Some(v) if v.is_nan() => "NA".into(),
        Some(v) if v.is_infinite() => if v > 0.0 { "Inf" } else { "-Inf" }.into(),
        Some(v) => format!("{v}"),
        None => "NA".into(),
    }
}

pub fn to_csv<I, R>(header: &[&str], rows: I) -> String
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r.into_iter().collect::<Vec<_>>())
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// An error with the exit code it maps to.
struct Failure {
    code: i32,
    error: anyhow::Error,
}

trait ExitContext<T> {
    fn code(self, code: i32) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> ExitContext<T> for Result<T, E> {
    fn code(self, code: i32) -> Result<T, Failure> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<i32, Failure> {
    let methods = parse_methods(&args.methods).code(EXIT_INPUT)?;
    let mut ds = ClusterDataset::load_csv(&args.data)
        .with_context(|| format!("loading {}", args.data.display()))
        .code(EXIT_INPUT)?;
    if let Some(names) = &args.covariates {
        ds = ds.select_covariates(names).code(EXIT_INPUT)?;
    }
    let report = analyze::analyze(&ds, &args.data.display().to_string(), &methods).code(EXIT_NUMERICAL)?;
    match &args.out {
        Some(dir) => report.write(dir).code(EXIT_INPUT)?,
        None => print!("{}\n{}", report.effects_csv(), report.balance_csv()),
    }
    for f in &report.balance_failures {
        eprintln!("warning: balance not computed for {f}");
    }
    Ok(if report.any_failed() {
        EXIT_NUMERICAL
    } else if report.any_non_converged() {
        EXIT_PARTIAL
    } else {
        EXIT_OK
    })
}

fn cmd_simulate(args: &SimulateArgs) -> Result<i32, Failure> {
    let cfg = StudyConfig::load(&args.config).code(EXIT_INPUT)?;
    let workers = args.workers.or(cfg.workers).unwrap_or_else(default_workers);
    let report = simulate::run(&cfg, workers).code(EXIT_NUMERICAL)?;
    match args.out.as_ref().or(cfg.output.as_ref()) {
        Some(dir) => report.write(dir).code(EXIT_INPUT)?,
        None => print!("{}", report.metrics_csv()),
    }
    Ok(EXIT_OK)
}

fn cmd_truth(args: &TruthArgs) -> Result<i32, Failure> {
    let row = scenario(&args.scenario).code(EXIT_INPUT)?;
    let mut cfg = SimConfig::from_scenario(row, 2, args.mean_size as f64, args.icc, 1, args.seed);
    if let Some(b) = args.beta_z {
        cfg.beta_z = b;
    }
    if let Some(b) = args.beta0 {
        cfg.beta0 = b;
    }
    cfg.custom = cfg.reference().is_none();
    cfg.validate().code(EXIT_INPUT)?;
    if args.clusters == 0 || args.mean_size == 0 {
        return Err(anyhow::anyhow!("--clusters and --mean-size must be positive")).code(EXIT_INPUT);
    }
    let workers = args.workers.unwrap_or_else(default_workers);
    let truth = with_workers(workers, || {
        compute_true_delta_sized(&cfg, args.seed, args.clusters, args.mean_size)
    })
    .code(EXIT_NUMERICAL)?
    .code(EXIT_INPUT)?;
    if args.json {
        let out = serde_json::json!({
            "scenario": row.key(),
            "custom": cfg.custom,
            "beta0": cfg.beta0,
            "beta_z": cfg.beta_z,
            "icc_latent": cfg.icc_latent,
            "truth": truth,
        });
        println!("{}", serde_json::to_string_pretty(&out).code(EXIT_NUMERICAL)?);
    } else {
        println!("scenario: {}{}", row.key(), if cfg.custom { " (custom)" } else { "" });
        println!("icc_latent: {}", cfg.icc_latent);
        println!("delta: {:.6}", truth.delta);
        println!("p1: {:.6}", truth.p1);
        println!("p0: {:.6}", truth.p0);
        println!(
            "population: {} clusters, mean size {}",
            truth.population_clusters, truth.population_mean_size
        );
        println!("oracle_seed: {}", truth.oracle_seed);
    }
    Ok(EXIT_OK)
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Analyze(a) => cmd_analyze(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Truth(a) => cmd_truth(a),
    };
    match result {
        Ok(code) => code,
        Err(Failure { code, error }) => {
            eprintln!("error: {error:#}");
            code
        }
    }
}
