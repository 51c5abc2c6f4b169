//! Risk estimation and coverage experiments.
//!
//! Randomness is ChaCha8 keyed by `(seed, stream)`: Monte Carlo batch `b`
//! and coverage trial `t` each own a stream, so results do not depend on
//! how rayon schedules them.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{Beta, ContinuousCDF, Normal};

use crate::bounds::{epsilon, BoundQuery};
use crate::error::{check_dim, Error, Result};
use crate::sets::ConvexSet;
use crate::support::{check_degeneracy, count_support, DegeneracyStatus, SupportParams};
use crate::vi::{AffineOperator, Operator, ScenarioVIProblem, SolverParams};

/// An event over the uncertainty; `true` means violation.
pub type Predicate = Arc<dyn Fn(&DVector<f64>) -> bool + Send + Sync>;

pub const MIN_MC_SAMPLES: usize = 100;
pub const CONFIDENCE: f64 = 0.95;
const BATCH: usize = 8192;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RiskMethod {
    MonteCarlo,
    ClosedForm,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskEstimate {
    pub value: f64,
    pub method: RiskMethod,
    /// Exact binomial 95% interval; equal to `value` for closed forms.
    pub ci_low: f64,
    pub ci_high: f64,
    pub samples_used: usize,
    pub seed: Option<u64>,
}

/// Two-sided Clopper-Pearson interval for `k` successes in `n` trials.
pub fn clopper_pearson(k: usize, n: usize, confidence: f64) -> Result<(f64, f64)> {
    if n == 0 || k > n || !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::InvalidInput(format!(
            "bad binomial interval request k={k} n={n} confidence={confidence}"
        )));
    }
    let tail = (1.0 - confidence) / 2.0;
    let (kf, nf) = (k as f64, n as f64);
    let beta = |a: f64, b: f64| Beta::new(a, b).map_err(|e| Error::InvalidInput(e.to_string()));
    let lo = if k == 0 { 0.0 } else { beta(kf, nf - kf + 1.0)?.inverse_cdf(tail) };
    let hi = if k == n { 1.0 } else { beta(kf + 1.0, nf - kf)?.inverse_cdf(1.0 - tail) };
    Ok((lo, hi))
}

/// Violation frequency of `predicate` over `num_samples` draws.
pub fn mc_risk<S>(predicate: &Predicate, sampler: S, num_samples: usize, seed: u64) -> Result<RiskEstimate>
where
    S: Fn(&mut ChaCha8Rng) -> Result<DVector<f64>> + Sync,
{
    if num_samples < MIN_MC_SAMPLES {
        return Err(Error::InvalidInput(format!(
            "Monte Carlo risk needs at least {MIN_MC_SAMPLES} samples, got {num_samples}"
        )));
    }
    let batches = num_samples.div_ceil(BATCH);
    let hits = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(seed, b as u64);
            let len = BATCH.min(num_samples - b * BATCH);
            let mut hits = 0usize;
            for _ in 0..len {
                let d = sampler(&mut rng).map_err(|e| match e {
                    Error::SamplerFailure(_) => e,
                    other => Error::SamplerFailure(other.to_string()),
                })?;
                hits += predicate(&d) as usize;
            }
            Ok(hits)
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum::<usize>();
    let (ci_low, ci_high) = clopper_pearson(hits, num_samples, CONFIDENCE)?;
    Ok(RiskEstimate {
        value: hits as f64 / num_samples as f64,
        method: RiskMethod::MonteCarlo,
        ci_low,
        ci_high,
        samples_used: num_samples,
        seed: Some(seed),
    })
}

/// Rejects asymmetric or indefinite covariances (relative floor `1e-10`).
pub fn check_covariance(sigma: &DMatrix<f64>) -> Result<()> {
    if !sigma.is_square() {
        return Err(Error::DimensionMismatch {
            expected: sigma.nrows(),
            got: sigma.ncols(),
        });
    }
    let scale = sigma.amax().max(f64::MIN_POSITIVE);
    if (sigma - sigma.transpose()).amax() > 1e-12 * scale {
        return Err(Error::InvalidInput("covariance is not symmetric".into()));
    }
    if sigma.nrows() == 0 {
        return Ok(());
    }
    let min = sigma.clone().symmetric_eigenvalues().min();
    if min < -1e-10 * scale {
        return Err(Error::NonPsdCovariance { min_eigenvalue: min });
    }
    Ok(())
}

/// `P{a . d >= threshold}` for `d ~ N(mu, sigma)`.
///
/// With zero variance the event is deterministic and the boundary counts as
/// a violation.
pub fn gaussian_linear_risk(a: &DVector<f64>, threshold: f64, mu: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<RiskEstimate> {
    check_dim(a.len(), mu.len())?;
    check_dim(a.len(), sigma.nrows())?;
    check_covariance(sigma)?;
    let mean = a.dot(mu);
    let var = (sigma * a).dot(a);
    let value = if var <= 0.0 {
        if mean >= threshold {
            1.0
        } else {
            0.0
        }
    } else {
        let z = (threshold - mean) / var.sqrt();
        Normal::standard().sf(z)
    };
    Ok(RiskEstimate {
        value,
        method: RiskMethod::ClosedForm,
        ci_low: value,
        ci_high: value,
        samples_used: 0,
        seed: None,
    })
}

/// A family of scenario problems whose risk is known exactly.
pub trait CoverageInstance: Sync {
    fn draw(&self, rng: &mut ChaCha8Rng) -> Result<DVector<f64>>;

    fn problem(&self, samples: &[DVector<f64>]) -> Result<ScenarioVIProblem>;

    /// `V(x)` under the sampling law.
    fn exact_risk(&self, x: &DVector<f64>) -> f64;

    fn solver(&self) -> SolverParams {
        SolverParams::default()
    }

    fn support(&self) -> SupportParams {
        SupportParams::default()
    }
}

/// `F(x) = x - 1` on `x <= delta_i` with `delta ~ U[0, 2]`.
///
/// `x* = min(1, min_i delta_i)` and `V(x*) = x*/2`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Builtin1d;

impl CoverageInstance for Builtin1d {
    fn draw(&self, rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
        Ok(DVector::from_element(1, rng.random_range(0.0..2.0)))
    }

    fn problem(&self, samples: &[DVector<f64>]) -> Result<ScenarioVIProblem> {
        let op: Arc<dyn Operator> = Arc::new(AffineOperator::new(DMatrix::identity(1, 1), DVector::from_element(1, -1.0))?);
        let sets = samples
            .iter()
            .map(|d| ConvexSet::whole(1).with_halfspace(&[1.0], d[0]))
            .collect::<Result<_>>()?;
        ScenarioVIProblem::new_vi(op, sets)
    }

    fn exact_risk(&self, x: &DVector<f64>) -> f64 {
        (x[0] / 2.0).clamp(0.0, 1.0)
    }

    fn solver(&self) -> SolverParams {
        SolverParams::default().with_tol(1e-11)
    }

    fn support(&self) -> SupportParams {
        SupportParams {
            comparison_tol: 1e-7,
            screen_margin: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub s_star: usize,
    pub epsilon: f64,
    pub risk: f64,
    pub violated: bool,
    /// Excluded from the rate: invalid or ambiguous support report, or a
    /// failed non-degeneracy check.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoverageResult {
    pub trials: usize,
    pub n_samples: usize,
    pub beta: f64,
    pub seed: u64,
    pub violations: usize,
    pub degenerate_trials: usize,
    /// `violations / (trials - degenerate_trials)`.
    pub empirical_rate: f64,
    pub s_star_histogram: BTreeMap<usize, usize>,
    pub records: Vec<TrialRecord>,
}

fn run_trial<I: CoverageInstance>(instance: &I, n_samples: usize, beta: f64, seed: u64, trial: usize) -> Result<TrialRecord> {
    let mut rng = stream_rng(seed, trial as u64);
    let samples = (0..n_samples)
        .map(|_| instance.draw(&mut rng))
        .collect::<Result<Vec<_>>>()?;
    let problem = instance.problem(&samples)?;
    let solver = instance.solver();
    let report = count_support(&problem, &solver, &instance.support())?;
    let mut degenerate = !report.valid || report.ambiguous;
    if !degenerate {
        degenerate = check_degeneracy(&problem, &report, &solver)? == DegeneracyStatus::Failed;
    }
    let eps = epsilon(&BoundQuery::new(report.s_star, n_samples, beta)?)?;
    let risk = instance.exact_risk(&report.x_star);
    Ok(TrialRecord {
        trial,
        s_star: report.s_star,
        epsilon: eps,
        risk,
        violated: risk > eps,
        degenerate,
    })
}

/// Repeats draw, solve, count, certify and compares `V(x*)` with `eps(s*)`.
pub fn coverage_experiment<I: CoverageInstance>(
    instance: &I,
    n_samples: usize,
    trials: usize,
    beta: f64,
    seed: u64,
) -> Result<CoverageResult> {
    if trials == 0 {
        return Err(Error::InvalidInput("need at least one trial".into()));
    }
    BoundQuery::new(0, n_samples, beta)?;
    let records = (0..trials)
        .into_par_iter()
        .map(|t| run_trial(instance, n_samples, beta, seed, t))
        .collect::<Result<Vec<_>>>()?;
    let mut s_star_histogram = BTreeMap::new();
    let (mut violations, mut degenerate_trials) = (0, 0);
    for r in &records {
        if r.degenerate {
            degenerate_trials += 1;
            continue;
        }
        *s_star_histogram.entry(r.s_star).or_insert(0) += 1;
        violations += r.violated as usize;
    }
    let counted = trials - degenerate_trials;
    Ok(CoverageResult {
        trials,
        n_samples,
        beta,
        seed,
        violations,
        degenerate_trials,
        empirical_rate: if counted == 0 { 0.0 } else { violations as f64 / counted as f64 },
        s_star_histogram,
        records,
    })
}
