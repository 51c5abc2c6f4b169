use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use scenario_vi::bounds::{certify, CertificateKind};
use scenario_vi::demand::{run_dr_experiment, DrConfig, GaussianModel, GaussianSampler};
use scenario_vi::error::StageExt;
use scenario_vi::problem::{BuiltProblem, ProblemFile};
use scenario_vi::risk::{coverage_experiment, gaussian_linear_risk, mc_risk, Builtin1d, Predicate, RiskEstimate};
use scenario_vi::support::{check_degeneracy, count_support, SupportParams, SupportReport};
use scenario_vi::vi::{solve_vi, Mode, SolverParams};
use scenario_vi::{Error, Result};

use crate::output::Run;
use crate::{Cli, Command, CoverageArgs, DrArgs, Instance, RiskArgs, RiskMode};

pub fn run(cli: &Cli) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let mut out = Run::start(&cli.out_dir, cli.command.name())?;
    let (text, seed) = match &cli.command {
        Command::Certify(a) => {
            let kind = if a.a_priori {
                CertificateKind::APriori
            } else {
                CertificateKind::APosteriori
            };
            let c = certify(a.k, a.n_samples, a.beta, kind).stage("certify")?;
            let report = CertificateOut {
                k: c.query.k,
                n: c.query.n_samples,
                beta: c.query.beta,
                t: c.t_value,
                epsilon: c.epsilon,
                kind: c.kind,
                residual: c.residual,
            };
            (out.json("certify.json", &report)?, seed)
        }
        Command::SolveVi(a) => {
            let built = load_problem(&a.problem, a.qvi)?;
            let mut params = SolverParams::default();
            params.tol = a.tol;
            let sol = solve_vi(&built.problem, &params).stage("solve")?;
            let (x, levels) = built.decode(&sol.x_star);
            let report = SolveOut {
                mode: built.problem.mode(),
                x: x.iter().copied().collect(),
                levels,
                residual: sol.natural_residual,
                iterations: sol.iterations,
                converged: sol.converged,
                feasibility_violation: sol.feasibility_violation,
            };
            (out.json("solve-vi.json", &report)?, seed)
        }
        Command::Support(a) => {
            let built = load_problem(&a.problem, a.qvi)?;
            let params = SupportParams {
                comparison_tol: a.tol,
                screen_margin: a.screen_margin,
            };
            let solver = SolverParams::default();
            let mut report = count_support(&built.problem, &solver, &params).stage("support")?;
            if report.valid {
                report.degeneracy_check = check_degeneracy(&built.problem, &report, &solver).stage("degeneracy")?;
            }
            let (x, levels) = built.decode(&report.x_star);
            let report = SupportOut {
                x: x.iter().copied().collect(),
                levels,
                report,
            };
            (out.json("support.json", &report)?, seed)
        }
        Command::Risk(a) => (risk(a, seed, &mut out)?, seed),
        Command::Coverage(a) => (coverage(a, seed, &mut out)?, seed),
        Command::DrExperiment(a) => dr_experiment(a, cli.seed, &mut out)?,
    };
    print!("{text}");
    out.finish(&cli.command, seed)
}

#[derive(Serialize)]
struct CertificateOut {
    k: usize,
    #[serde(rename = "N")]
    n: usize,
    beta: f64,
    t: f64,
    epsilon: f64,
    kind: CertificateKind,
    residual: f64,
}

#[derive(Serialize)]
struct SolveOut {
    mode: Mode,
    x: Vec<f64>,
    /// Worst-case cost levels, for robust equilibria.
    #[serde(skip_serializing_if = "Option::is_none")]
    levels: Option<Vec<f64>>,
    residual: f64,
    iterations: usize,
    converged: bool,
    feasibility_violation: f64,
}

#[derive(Serialize)]
struct SupportOut {
    x: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    levels: Option<Vec<f64>>,
    #[serde(flatten)]
    report: SupportReport,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))
}

fn load_problem(path: &Path, qvi: bool) -> Result<BuiltProblem> {
    let file = ProblemFile::from_json(&read(path)?).stage("input")?;
    file.build(qvi).stage("build")
}

/// The event `a . d > threshold` for `d ~ N(mu, sigma)`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RiskSpec {
    a: Vec<f64>,
    threshold: f64,
    mu: Vec<f64>,
    sigma: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct RiskOut {
    mode: RiskMode,
    #[serde(flatten)]
    estimate: RiskEstimate,
}

fn risk(args: &RiskArgs, seed: u64, out: &mut Run) -> Result<String> {
    let spec: RiskSpec = serde_json::from_str(&read(&args.spec)?).stage("input")?;
    let n = spec.mu.len();
    if spec.a.len() != n || spec.sigma.len() != n || spec.sigma.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidInput("a, mu and sigma must share one dimension".into())).stage("input");
    }
    let a = DVector::from_column_slice(&spec.a);
    let mu = DVector::from_column_slice(&spec.mu);
    let sigma = DMatrix::from_fn(n, n, |i, j| spec.sigma[i][j]);
    let estimate = match args.mode {
        RiskMode::Gaussian => gaussian_linear_risk(&a, spec.threshold, &mu, &sigma).stage("risk")?,
        RiskMode::Mc => {
            let sampler = GaussianSampler::new(&GaussianModel {
                mu,
                sigma,
                regularization: 0.0,
            })
            .stage("risk")?;
            let threshold = spec.threshold;
            let event: Predicate = Arc::new(move |d: &DVector<f64>| a.dot(d) > threshold);
            mc_risk(&event, |rng| Ok(sampler.draw_unclipped(rng)), args.samples, seed).stage("risk")?
        }
    };
    out.json(
        "risk.json",
        &RiskOut {
            mode: args.mode,
            estimate,
        },
    )
}

#[derive(Serialize)]
struct CoverageOut {
    instance: Instance,
    trials: usize,
    n_samples: usize,
    beta: f64,
    seed: u64,
    violations: usize,
    degenerate_trials: usize,
    empirical_rate: f64,
    s_star_histogram: BTreeMap<usize, usize>,
}

fn coverage(args: &CoverageArgs, seed: u64, out: &mut Run) -> Result<String> {
    let result = match args.instance {
        Instance::Builtin1d => coverage_experiment(&Builtin1d, args.n_samples, args.trials, args.beta, seed),
    }
    .stage("coverage")?;
    let mut csv = String::from("trial,s_star,epsilon,risk,violated,degenerate\n");
    for r in &result.records {
        writeln!(csv, "{},{},{},{},{},{}", r.trial, r.s_star, r.epsilon, r.risk, r.violated, r.degenerate)
            .expect("writing to a string");
    }
    out.file("coverage-trials.csv", |p| Ok(fs::write(p, &csv)?))?;
    out.json(
        "coverage.json",
        &CoverageOut {
            instance: args.instance,
            trials: result.trials,
            n_samples: result.n_samples,
            beta: result.beta,
            seed: result.seed,
            violations: result.violations,
            degenerate_trials: result.degenerate_trials,
            empirical_rate: result.empirical_rate,
            s_star_histogram: result.s_star_histogram,
        },
    )
}

fn dr_experiment(args: &DrArgs, seed: Option<u64>, out: &mut Run) -> Result<(String, u64)> {
    let mut config: DrConfig = serde_json::from_str(&read(&args.config)?).stage("config")?;
    if let Some(s) = seed {
        config.seed = s;
    }
    let base = args.config.parent().unwrap_or(Path::new("."));
    let report = run_dr_experiment(&config, base)?;
    out.file("dr-plot.csv", |p| report.write_plot_csv(p))?;
    out.file("dr-costs.csv", |p| report.write_cost_csv(p))?;
    Ok((out.json("dr-report.json", &report)?, config.seed))
}
