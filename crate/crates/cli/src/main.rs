//! `scenvi`: scenario certificates, VI solving, support counting, risk
//! estimation and the demand-response experiment from one entry point.
//!
//! Each run prints its main JSON result on standard output, writes it with
//! any CSV companions into `--out-dir`, and records a manifest with SHA-256
//! digests of those files. Domain failures print `{stage, code, message}` on
//! standard error and exit with 1; usage errors exit with 2.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use scenario_vi::Error;

/// Thread count for the parallel workflows; defaults to all cores.
const THREADS_ENV: &str = "SCENVI_THREADS";

#[derive(Debug, Parser)]
#[command(name = "scenvi", version, about = "Scenario-based certificates for variational inequalities and games")]
struct Cli {
    /// Directory receiving result files and the run manifest.
    #[arg(long, global = true, default_value = "scenvi-out")]
    out_dir: PathBuf,

    /// Seed for every random draw; absent means 0.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Risk bound for k support constraints out of N samples.
    Certify(CertifyArgs),
    /// Solve a VI (or QVI) described by a problem file.
    SolveVi(SolveArgs),
    /// Count support scenarios by leave-one-out re-solving.
    Support(SupportArgs),
    /// Probability that a Gaussian vector crosses a linear threshold.
    Risk(RiskArgs),
    /// Empirical coverage of the a-posteriori certificate.
    Coverage(CoverageArgs),
    /// The demand-response equilibrium experiment.
    DrExperiment(DrArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Certify(_) => "certify",
            Command::SolveVi(_) => "solve-vi",
            Command::Support(_) => "support",
            Command::Risk(_) => "risk",
            Command::Coverage(_) => "coverage",
            Command::DrExperiment(_) => "dr-experiment",
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct CertifyArgs {
    /// Number of support constraints (decision dimension with --a-priori).
    #[arg(long)]
    k: usize,
    #[arg(long)]
    n_samples: usize,
    #[arg(long)]
    beta: f64,
    #[arg(long)]
    a_priori: bool,
}

#[derive(Debug, Args, Serialize)]
struct SolveArgs {
    #[arg(long)]
    problem: PathBuf,
    /// Treat anchored sets as parametrized (robust games: the epigraph QVI).
    #[arg(long)]
    qvi: bool,
    /// Natural-residual tolerance.
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
struct SupportArgs {
    #[arg(long)]
    problem: PathBuf,
    /// Displacement above which a scenario counts as support.
    #[arg(long, default_value_t = scenario_vi::support::COMPARISON_TOL)]
    tol: f64,
    #[arg(long)]
    qvi: bool,
    /// Skip scenarios strictly inactive by this margin at the solution.
    #[arg(long)]
    screen_margin: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum RiskMode {
    Mc,
    Gaussian,
}

#[derive(Debug, Args, Serialize)]
struct RiskArgs {
    #[arg(long, value_enum)]
    mode: RiskMode,
    /// JSON `{a, threshold, mu, sigma}` for the event `a . d > threshold`.
    #[arg(long)]
    spec: PathBuf,
    /// Monte Carlo draws.
    #[arg(long, default_value_t = 1_000_000)]
    samples: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Instance {
    #[value(name = "builtin-1d")]
    #[serde(rename = "builtin-1d")]
    Builtin1d,
}

#[derive(Debug, Args, Serialize)]
struct CoverageArgs {
    #[arg(long, value_enum)]
    instance: Instance,
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, default_value_t = 0.05)]
    beta: f64,
    #[arg(long, default_value_t = 50)]
    n_samples: usize,
}

#[derive(Debug, Args, Serialize)]
struct DrArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Serialize)]
struct ErrorObject<'a> {
    stage: &'a str,
    code: &'a str,
    message: String,
}

fn configure_threads() -> Result<(), Error> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidInput(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::InvalidInput(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    let result = configure_threads().and_then(|()| commands::run(&cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let obj = ErrorObject {
                stage: e.stage().unwrap_or(name),
                code: e.code(),
                message: e.root().to_string(),
            };
            eprintln!("{}", serde_json::to_string(&obj).expect("error object serializes"));
            ExitCode::from(1)
        }
    }
}
