//! Day-ahead demand response with risk-averse agents.
//!
//! Agent `j` buys `x^j_t` MWh in hour `t` at unit price `alpha_t sigma_t(x) + beta_t d_t`,
//! where `sigma` is the total flexible load and `d` the inflexible demand,
//! and must buy at least `gamma^j` MWh over the day. Demands are MWh,
//! price coefficients $/MWh^2, costs $.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bounds::{certify, Certificate, CertificateKind};
use crate::error::{check_dim, Error, Result, StageExt};
use crate::games::{
    aggregate_risk_spec, build_lifted_vi, solve_sampled_robust_eq, CostModel, GameSpec, LocalSets, SreParams,
    UncertaintyMode,
};
use crate::risk::{check_covariance, gaussian_linear_risk, mc_risk, stream_rng, RiskEstimate};
use crate::sets::ConvexSet;
use crate::support::{check_degeneracy, count_support, DegeneracyStatus, SupportParams};
use crate::vi::SolverParams;

pub const RIDGE_FACTOR: f64 = 1e-6;
pub const UNITS_DEMAND: &str = "MWh";
pub const UNITS_PRICE: &str = "$/MWh^2";
pub const UNITS_COST: &str = "$";

const STREAM_GAMMA: u64 = 0;
const STREAM_HISTORY: u64 = 1;
const STREAM_SAMPLES: u64 = 2;
const STREAM_COSTS: u64 = 3;
/// Monte Carlo batches use their own streams under a derived seed.
const MC_SEED_KEY: u64 = 0x6d63_5f72_6973_6b00;

#[derive(Debug, Clone)]
pub struct DRInstance {
    pub m: usize,
    pub t: usize,
    pub alpha: Vec<f64>,
    pub beta_price: Vec<f64>,
    pub gamma: Vec<f64>,
    /// `N x T`.
    pub demand_samples: DMatrix<f64>,
}

impl DRInstance {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.t == 0 {
            return Err(Error::InvalidInput("need at least one agent and one hour".into()));
        }
        check_dim(self.t, self.alpha.len())?;
        check_dim(self.t, self.beta_price.len())?;
        check_dim(self.m, self.gamma.len())?;
        check_dim(self.t, self.demand_samples.ncols())?;
        let positive = |v: &[f64]| v.iter().all(|&a| a > 0.0 && a.is_finite());
        if !positive(&self.alpha) || !positive(&self.beta_price) {
            return Err(Error::InvalidInput("price coefficients must be positive".into()));
        }
        if !positive(&self.gamma) {
            return Err(Error::InvalidInput("energy requirements must be positive".into()));
        }
        for (r, row) in self.demand_samples.row_iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                if !(v >= 0.0) {
                    return Err(Error::NegativeDemand { row: r, col: c, value: v });
                }
            }
        }
        Ok(())
    }

    pub fn samples(&self) -> Vec<DVector<f64>> {
        self.demand_samples.row_iter().map(|r| r.transpose()).collect()
    }
}

/// `J^j(x; d) = sum_t (alpha_t sigma_t(x) + beta_t d_t) x^j_t`.
#[derive(Debug, Clone)]
pub struct DrCost {
    dims: Vec<usize>,
    alpha: DVector<f64>,
    beta: DVector<f64>,
}

impl DrCost {
    pub fn new(m: usize, alpha: &[f64], beta: &[f64]) -> Result<Self> {
        check_dim(alpha.len(), beta.len())?;
        Ok(DrCost {
            dims: vec![alpha.len(); m],
            alpha: DVector::from_column_slice(alpha),
            beta: DVector::from_column_slice(beta),
        })
    }

    fn t(&self) -> usize {
        self.alpha.len()
    }

    pub fn sigma(&self, x: &DVector<f64>) -> DVector<f64> {
        let t = self.t();
        let mut s = DVector::zeros(t);
        for j in 0..self.dims.len() {
            s += x.rows(j * t, t);
        }
        s
    }

    /// `P(x) = 1/2 sum_t alpha_t (sigma_t^2 + sum_j (x^j_t)^2)`; its gradient is
    /// the uncertainty-free pseudo-gradient.
    pub fn potential(&self, x: &DVector<f64>) -> f64 {
        let t = self.t();
        let s = self.sigma(x);
        let own: f64 = (0..self.dims.len())
            .map(|j| x.rows(j * t, t).component_mul(&x.rows(j * t, t)).dot(&self.alpha))
            .sum();
        0.5 * (s.component_mul(&s).dot(&self.alpha) + own)
    }
}

impl CostModel for DrCost {
    fn dims(&self) -> &[usize] {
        &self.dims
    }

    fn value(&self, j: usize, x: &DVector<f64>, delta: Option<&DVector<f64>>) -> f64 {
        let t = self.t();
        let mut price = self.alpha.component_mul(&self.sigma(x));
        if let Some(d) = delta {
            price += self.beta.component_mul(d);
        }
        price.dot(&x.rows(j * t, t))
    }

    fn own_gradient(&self, j: usize, x: &DVector<f64>, delta: Option<&DVector<f64>>) -> Option<DVector<f64>> {
        let t = self.t();
        let mut g = self.alpha.component_mul(&(self.sigma(x) + x.rows(j * t, t)));
        if let Some(d) = delta {
            g += self.beta.component_mul(d);
        }
        Some(g)
    }

    fn linear_uncertainty(&self, _j: usize, delta: &DVector<f64>) -> Option<(DVector<f64>, f64)> {
        Some((self.beta.component_mul(delta), 0.0))
    }

    fn own_quadratic(
        &self,
        j: usize,
        anchor: &DVector<f64>,
        delta: &DVector<f64>,
    ) -> Option<(DMatrix<f64>, DVector<f64>, f64)> {
        let t = self.t();
        let others = self.sigma(anchor) - anchor.rows(j * t, t);
        let q = DMatrix::from_diagonal(&(&self.alpha * 2.0));
        let c = self.alpha.component_mul(&others) + self.beta.component_mul(delta);
        Some((q, c, 0.0))
    }

    fn cost_scale(&self) -> f64 {
        self.alpha.max()
    }

    // Jacobian diag(alpha) ⊗ (I + 11'), eigenvalues alpha_t and (M+1) alpha_t
    fn strong_monotonicity(&self) -> Option<f64> {
        Some(self.alpha.min())
    }

    fn lipschitz(&self) -> Option<f64> {
        Some((self.dims.len() as f64 + 1.0) * self.alpha.max())
    }
}

/// `{x >= 0, sum_t x_t >= gamma}`.
pub fn agent_set(t: usize, gamma: f64) -> Result<ConvexSet> {
    ConvexSet::whole(t)
        .with_bounds(vec![0.0; t], vec![f64::INFINITY; t])?
        .with_halfspace(&vec![-1.0; t], -gamma)
}

pub fn build_dr_game(instance: &DRInstance) -> Result<GameSpec> {
    instance.validate()?;
    let cost = DrCost::new(instance.m, &instance.alpha, &instance.beta_price)?;
    let local = instance
        .gamma
        .iter()
        .map(|&g| agent_set(instance.t, g).map(LocalSets::Fixed))
        .collect::<Result<Vec<_>>>()?;
    GameSpec::new(Arc::new(cost), local, UncertaintyMode::Costs)
}

/// Reads an `N x T` profile matrix. A first row that does not parse as
/// numbers is taken as a header.
pub fn load_profiles(path: &Path) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let parsed: std::result::Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        let row = match parsed {
            Ok(row) => row,
            Err(_) if r == 0 => continue,
            Err(e) => return Err(Error::Parse(format!("{}: row {r}: {e}", path.display()))),
        };
        let w = *width.get_or_insert(row.len());
        if row.len() != w {
            return Err(Error::InconsistentWidth {
                row: rows.len(),
                expected: w,
                got: row.len(),
            });
        }
        for (c, &v) in row.iter().enumerate() {
            if !(v >= 0.0) {
                return Err(Error::NegativeDemand {
                    row: rows.len(),
                    col: c,
                    value: v,
                });
            }
        }
        rows.push(row);
    }
    let w = width.ok_or_else(|| Error::Parse(format!("{}: no data rows", path.display())))?;
    Ok(DMatrix::from_fn(rows.len(), w, |r, c| rows[r][c]))
}

pub fn save_profiles(path: &Path, profiles: &DMatrix<f64>) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in profiles.row_iter() {
        writer.write_record(row.iter().map(|v| v.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ridge {
    /// `RIDGE_FACTOR * trace(Sigma) / T`.
    #[default]
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianModel {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub regularization: f64,
}

/// Sample mean and unbiased covariance plus a ridge.
pub fn fit_gaussian(profiles: &DMatrix<f64>, ridge: Ridge) -> Result<GaussianModel> {
    let (n, t) = profiles.shape();
    if n < 2 {
        return Err(Error::InsufficientData { rows: n });
    }
    let mu = profiles.row_mean().transpose();
    let centered = DMatrix::from_fn(n, t, |r, c| profiles[(r, c)] - mu[c]);
    let mut sigma = centered.tr_mul(&centered) / (n as f64 - 1.0);
    let regularization = match ridge {
        Ridge::Auto => RIDGE_FACTOR * sigma.trace() / t as f64,
        Ridge::Fixed(r) if r >= 0.0 && r.is_finite() => r,
        Ridge::Fixed(r) => return Err(Error::InvalidInput(format!("ridge must be nonnegative, got {r}"))),
    };
    for i in 0..t {
        sigma[(i, i)] += regularization;
    }
    Ok(GaussianModel {
        mu,
        sigma,
        regularization,
    })
}

/// Draws `mu + L z` clipped at zero, with `L L' = Sigma`.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    mu: DVector<f64>,
    l: DMatrix<f64>,
}

impl GaussianSampler {
    pub fn new(model: &GaussianModel) -> Result<Self> {
        check_dim(model.mu.len(), model.sigma.nrows())?;
        check_covariance(&model.sigma).map_err(|e| Error::FactorizationFailure(e.to_string()))?;
        let l = match model.sigma.clone().cholesky() {
            Some(c) => c.l(),
            None => {
                // semidefinite: symmetric square root through the eigenbasis
                let eig = model.sigma.clone().symmetric_eigen();
                let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
                &eig.eigenvectors * DMatrix::from_diagonal(&root)
            }
        };
        if l.iter().any(|v| !v.is_finite()) {
            return Err(Error::FactorizationFailure("non-finite factor".into()));
        }
        Ok(GaussianSampler {
            mu: model.mu.clone(),
            l,
        })
    }

    /// One draw of `N(mu, Sigma)` itself.
    pub fn draw_unclipped(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let z = DVector::from_fn(self.mu.len(), |_, _| StandardNormal.sample(rng));
        &self.mu + &self.l * z
    }

    /// One clipped draw and the number of clipped coordinates.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> (DVector<f64>, usize) {
        let mut d = self.draw_unclipped(rng);
        let mut clipped = 0;
        for v in d.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
                clipped += 1;
            }
        }
        (d, clipped)
    }
}

#[derive(Debug, Clone)]
pub struct SampledProfiles {
    pub profiles: DMatrix<f64>,
    /// Fraction of entries raised to zero.
    pub clip_fraction: f64,
}

pub fn sample_profiles(model: &GaussianModel, count: usize, seed: u64) -> Result<SampledProfiles> {
    sample_stream(model, count, seed, STREAM_SAMPLES)
}

fn sample_stream(model: &GaussianModel, count: usize, seed: u64, stream: u64) -> Result<SampledProfiles> {
    let sampler = GaussianSampler::new(model)?;
    let t = model.mu.len();
    let mut rng = stream_rng(seed, stream);
    let mut profiles = DMatrix::zeros(count, t);
    let mut clipped = 0;
    for r in 0..count {
        let (d, c) = sampler.draw(&mut rng);
        profiles.set_row(r, &d.transpose());
        clipped += c;
    }
    let total = (count * t).max(1);
    Ok(SampledProfiles {
        profiles,
        clip_fraction: clipped as f64 / total as f64,
    })
}

/// Synthetic winter-day load history: a morning and an evening peak over a
/// base load near 21 GWh per hour, a day-level shift and AR(1) hourly noise.
pub fn synthetic_history(rows: usize, t: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = stream_rng(seed, STREAM_HISTORY);
    let shape: Vec<f64> = (0..t)
        .map(|k| {
            let h = (k as f64 + 0.5) * 24.0 / t as f64;
            21_000.0 + 3_500.0 * (-(h - 8.5).powi(2) / 8.0).exp() + 6_500.0 * (-(h - 18.5).powi(2) / 12.5).exp()
        })
        .collect();
    let level = Normal::new(0.0, 1_500.0).expect("valid law");
    let noise = Normal::new(0.0, 400.0).expect("valid law");
    let mut out = DMatrix::zeros(rows, t);
    for r in 0..rows {
        let shift = level.sample(&mut rng);
        let mut e = 0.0;
        for c in 0..t {
            e = 0.8 * e + noise.sample(&mut rng);
            out[(r, c)] = (shape[c] + shift + e).max(0.0);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncatedGaussian {
    pub mean: f64,
    pub sd: f64,
    pub low: f64,
    pub high: f64,
}

impl Default for TruncatedGaussian {
    fn default() -> Self {
        TruncatedGaussian {
            mean: 480.0,
            sd: 120.0,
            low: 400.0,
            high: 560.0,
        }
    }
}

impl TruncatedGaussian {
    const MAX_REJECTIONS: usize = 1_000_000;

    /// Rejection sampling from the untruncated law.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<f64> {
        if !(self.sd > 0.0 && self.low < self.high) {
            return Err(Error::InvalidInput(format!("bad truncated Gaussian {self:?}")));
        }
        let law = Normal::new(self.mean, self.sd).map_err(|e| Error::InvalidInput(e.to_string()))?;
        for _ in 0..Self::MAX_REJECTIONS {
            let v = law.sample(rng);
            if (self.low..=self.high).contains(&v) {
                return Ok(v);
            }
        }
        Err(Error::SamplerFailure("truncation window has negligible mass".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Hourly {
    Constant(f64),
    Profile(Vec<f64>),
}

impl Hourly {
    pub fn expand(&self, t: usize) -> Result<Vec<f64>> {
        match self {
            Hourly::Constant(v) => Ok(vec![*v; t]),
            Hourly::Profile(v) => {
                check_dim(t, v.len())?;
                Ok(v.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GammaLaw {
    TruncatedGaussian(TruncatedGaussian),
    Fixed { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    /// The first `N` rows of a profile file are the samples.
    Csv { path: PathBuf },
    /// `N` draws from a Gaussian fitted to `source_csv`, or to a synthetic
    /// history of `history_rows` days when no file is given.
    Gaussian {
        #[serde(default)]
        source_csv: Option<PathBuf>,
        #[serde(default)]
        history_rows: Option<usize>,
    },
}

fn default_mc_samples() -> usize {
    100_000
}

fn default_cost_samples() -> usize {
    1_000
}

fn default_history_rows() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrConfig {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "N")]
    pub n: usize,
    /// Confidence parameter of the certificate.
    pub beta: f64,
    pub alpha: Hourly,
    pub beta_price: Hourly,
    pub gamma_law: GammaLaw,
    pub data: DataSource,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub ridge: Ridge,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    /// Draws used for the cost distribution of the riskiest agent.
    #[serde(default = "default_cost_samples")]
    pub cost_samples: usize,
    #[serde(default)]
    pub comparison_tol: Option<f64>,
}

impl DrConfig {
    /// The desk-scale setup: 5 agents, 24 hours, 100 synthetic samples.
    pub fn desk(seed: u64, beta: f64) -> Self {
        DrConfig {
            m: 5,
            t: 24,
            n: 100,
            beta,
            alpha: Hourly::Constant(500.0),
            beta_price: Hourly::Constant(500.0),
            gamma_law: GammaLaw::TruncatedGaussian(TruncatedGaussian::default()),
            data: DataSource::Gaussian {
                source_csv: None,
                history_rows: None,
            },
            seed,
            ridge: Ridge::Auto,
            mc_samples: default_mc_samples(),
            cost_samples: default_cost_samples(),
            comparison_tol: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Units {
    pub demand: &'static str,
    pub price_coefficients: &'static str,
    pub cost: &'static str,
}

const UNITS: Units = Units {
    demand: UNITS_DEMAND,
    price_coefficients: UNITS_PRICE,
    cost: UNITS_COST,
};

#[derive(Debug, Clone, Serialize)]
pub struct EquilibriumSummary {
    /// One row of `T` hourly purchases per agent.
    pub x_sr: Vec<Vec<f64>>,
    pub t_sr: Vec<f64>,
    pub active_scenarios: Vec<usize>,
    pub iterations: usize,
    pub converged: bool,
    /// `sum_t x^j_t - gamma^j`.
    pub budget_slack: Vec<f64>,
    pub min_entry: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SupportSummary {
    pub s_star: usize,
    pub support_indices: Vec<usize>,
    pub comparison_tol: f64,
    pub screened: usize,
    pub ambiguous: bool,
    pub valid: bool,
    pub min_support_displacement: Option<f64>,
    pub max_non_support_displacement: Option<f64>,
    pub degeneracy_check: DegeneracyStatus,
    /// `n + M`, the a-priori support bound.
    pub dimension: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct PlotData {
    pub hour: Vec<usize>,
    pub mu: Vec<f64>,
    pub sigma_sr: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DrReport {
    pub config: DrConfig,
    pub units: Units,
    pub gamma: Vec<f64>,
    pub clip_fraction: f64,
    pub ridge: f64,
    pub equilibrium: EquilibriumSummary,
    pub support: SupportSummary,
    pub certificate: Certificate,
    /// Closed-form `V^j(x_sr)` under the fitted Gaussian.
    pub agent_risks: Vec<RiskEstimate>,
    pub max_agent_risk: f64,
    /// Monte Carlo risk of the lifted point (some agent's worst case exceeded).
    pub aggregate_risk: RiskEstimate,
    /// Every closed-form agent risk is at most the certificate.
    pub dominance: bool,
    pub riskiest_agent: usize,
    /// Costs of the riskiest agent at `x_sr` under fresh draws.
    pub cost_distribution: Vec<f64>,
    pub plot: PlotData,
}

impl DrReport {
    pub fn write_plot_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "mu_mwh", "sigma_sr_mwh"])?;
        for ((h, m), s) in self.plot.hour.iter().zip(&self.plot.mu).zip(&self.plot.sigma_sr) {
            w.write_record([h.to_string(), m.to_string(), s.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_cost_csv(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path)?;
        writeln!(f, "sample,agent,cost_usd,worst_case_usd")?;
        let level = self.equilibrium.t_sr[self.riskiest_agent];
        for (i, c) in self.cost_distribution.iter().enumerate() {
            writeln!(f, "{i},{},{c},{level}", self.riskiest_agent)?;
        }
        Ok(())
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Demands, the Gaussian used for the risk audit and the clip fraction.
fn acquire_data(config: &DrConfig, base: &Path) -> Result<(DMatrix<f64>, GaussianModel, f64)> {
    match &config.data {
        DataSource::Csv { path } => {
            let all = load_profiles(&resolve(base, path))?;
            check_dim(config.t, all.ncols())?;
            if all.nrows() < config.n {
                return Err(Error::InsufficientData { rows: all.nrows() });
            }
            let model = fit_gaussian(&all, config.ridge)?;
            Ok((all.rows(0, config.n).into_owned(), model, 0.0))
        }
        DataSource::Gaussian {
            source_csv,
            history_rows,
        } => {
            let history = match source_csv {
                Some(p) => load_profiles(&resolve(base, p))?,
                None => synthetic_history(history_rows.unwrap_or_else(default_history_rows), config.t, config.seed),
            };
            check_dim(config.t, history.ncols())?;
            let model = fit_gaussian(&history, config.ridge)?;
            let s = sample_profiles(&model, config.n, config.seed)?;
            Ok((s.profiles, model, s.clip_fraction))
        }
    }
}

fn draw_gamma(config: &DrConfig) -> Result<Vec<f64>> {
    match &config.gamma_law {
        GammaLaw::Fixed { values } => {
            check_dim(config.m, values.len())?;
            Ok(values.clone())
        }
        GammaLaw::TruncatedGaussian(law) => {
            let mut rng = stream_rng(config.seed, STREAM_GAMMA);
            (0..config.m).map(|_| law.sample(&mut rng)).collect()
        }
    }
}

/// The drawn instance together with the law used for the risk audit.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub instance: DRInstance,
    pub model: GaussianModel,
    /// Fraction of sampled demand entries clipped at zero.
    pub clip_fraction: f64,
}

/// Draws budgets and demand samples as configured.
pub fn prepare_instance(config: &DrConfig, base_dir: &Path) -> Result<Prepared> {
    let gamma = draw_gamma(config).stage("gamma")?;
    let (demands, model, clip_fraction) = acquire_data(config, base_dir).stage("data")?;
    let instance = DRInstance {
        m: config.m,
        t: config.t,
        alpha: config.alpha.expand(config.t).stage("config")?,
        beta_price: config.beta_price.expand(config.t).stage("config")?,
        gamma,
        demand_samples: demands,
    };
    Ok(Prepared {
        instance,
        model,
        clip_fraction,
    })
}

/// Samples, game, robust equilibrium, support count, certificate and risk audit.
pub fn run_dr_experiment(config: &DrConfig, base_dir: &Path) -> Result<DrReport> {
    if config.n == 0 {
        return Err(Error::EmptySamples).stage("config");
    }
    let Prepared {
        instance,
        model,
        clip_fraction,
    } = prepare_instance(config, base_dir)?;
    let gamma = instance.gamma.clone();
    let game = build_dr_game(&instance).stage("build-game")?;
    let samples = instance.samples();

    let sre = solve_sampled_robust_eq(
        &game,
        &samples,
        &SreParams {
            seed: config.seed,
            ..Default::default()
        },
    )
    .stage("solve-sre")?;
    if !sre.converged {
        return Err(Error::NotConverged {
            iterations: sre.iterations,
            residual: f64::NAN,
        })
        .stage("solve-sre");
    }

    let lifted = build_lifted_vi(&game, &samples).stage("support")?;
    let solver = SolverParams::default().warm_start(lifted.lift(&game, &sre.x_sr, &sre.t_sr));
    let params = SupportParams {
        comparison_tol: config.comparison_tol.unwrap_or(crate::support::COMPARISON_TOL),
        screen_margin: Some(1e-6),
    };
    let report = count_support(&lifted.problem, &solver, &params).stage("support")?;
    let degeneracy = if report.valid {
        check_degeneracy(&lifted.problem, &report, &solver).stage("support")?
    } else {
        DegeneracyStatus::Skipped
    };
    let certificate = certify(report.s_star, config.n, config.beta, CertificateKind::APosteriori).stage("certify")?;

    let x = &sre.x_sr;
    let beta = DVector::from_column_slice(&instance.beta_price);
    let t = config.t;
    let agent_risks = (0..config.m)
        .map(|j| {
            let a = beta.component_mul(&x.rows(j * t, t));
            let threshold = samples.iter().map(|d| a.dot(d)).fold(f64::NEG_INFINITY, f64::max);
            gaussian_linear_risk(&a, threshold, &model.mu, &model.sigma)
        })
        .collect::<Result<Vec<_>>>()
        .stage("risk")?;
    let (riskiest_agent, max_agent_risk) = agent_risks
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (j, r)| if r.value > b.1 { (j, r.value) } else { b });

    let sampler = GaussianSampler::new(&model).stage("risk")?;
    let predicate = aggregate_risk_spec(&game, &samples, x).stage("risk")?;
    let draw = |rng: &mut ChaCha8Rng| Ok(sampler.draw(rng).0);
    let aggregate_risk = mc_risk(&predicate, draw, config.mc_samples, config.seed ^ MC_SEED_KEY).stage("risk")?;

    let costs = sample_stream(&model, config.cost_samples, config.seed, STREAM_COSTS).stage("risk")?;
    let cost_distribution = costs
        .profiles
        .row_iter()
        .map(|d| game.cost().value(riskiest_agent, x, Some(&d.transpose())))
        .collect();

    let cost = DrCost::new(config.m, &instance.alpha, &instance.beta_price).stage("report")?;
    let per_agent: Vec<Vec<f64>> = (0..config.m).map(|j| x.rows(j * t, t).iter().copied().collect()).collect();
    let budget_slack = per_agent.iter().zip(&gamma).map(|(r, g)| r.iter().sum::<f64>() - g).collect();
    Ok(DrReport {
        config: config.clone(),
        units: UNITS,
        gamma,
        clip_fraction,
        ridge: model.regularization,
        equilibrium: EquilibriumSummary {
            min_entry: x.min(),
            x_sr: per_agent,
            t_sr: sre.t_sr.clone(),
            active_scenarios: sre.active_scenarios.clone(),
            iterations: sre.iterations,
            converged: sre.converged,
            budget_slack,
        },
        support: SupportSummary {
            s_star: report.s_star,
            support_indices: report.support_indices.clone(),
            comparison_tol: report.comparison_tol,
            screened: report.screened.len(),
            ambiguous: report.ambiguous,
            valid: report.valid,
            min_support_displacement: report.min_support_displacement,
            max_non_support_displacement: report.max_non_support_displacement,
            degeneracy_check: degeneracy,
            dimension: config.m * config.t + config.m,
        },
        dominance: agent_risks.iter().all(|r| r.value <= certificate.epsilon),
        certificate,
        max_agent_risk,
        agent_risks,
        aggregate_risk,
        riskiest_agent,
        cost_distribution,
        plot: PlotData {
            hour: (1..=t).collect(),
            mu: model.mu.iter().copied().collect(),
            sigma_sr: cost.sigma(x).iter().copied().collect(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::games::{pseudo_gradient, worst_case_cost};
    use crate::vi::estimate_strong_monotonicity;
    use nalgebra::dvector;

    #[test]
    fn single_hour_cost() {
        let cost = DrCost::new(1, &[500.0], &[500.0]).unwrap();
        assert_eq!(cost.value(0, &dvector![1.0], Some(&dvector![1.0])), 1000.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = stream_rng(3, 0);
        let (m, t) = (3, 4);
        let alpha: Vec<f64> = (0..t).map(|_| rng.random_range(1.0..5.0)).collect();
        let beta: Vec<f64> = (0..t).map(|_| rng.random_range(1.0..5.0)).collect();
        let cost = DrCost::new(m, &alpha, &beta).unwrap();
        for _ in 0..10 {
            let x = DVector::from_fn(m * t, |_, _| rng.random_range(0.0..3.0));
            let d = DVector::from_fn(t, |_, _| rng.random_range(0.0..3.0));
            for j in 0..m {
                let g = cost.own_gradient(j, &x, Some(&d)).unwrap();
                for k in 0..t {
                    let h = 1e-5;
                    let (mut xp, mut xm) = (x.clone(), x.clone());
                    xp[j * t + k] += h;
                    xm[j * t + k] -= h;
                    let fd = (cost.value(j, &xp, Some(&d)) - cost.value(j, &xm, Some(&d))) / (2.0 * h);
                    assert!((fd - g[k]).abs() < 1e-6, "{fd} vs {}", g[k]);
                }
            }
        }
    }

    #[test]
    fn potential_generates_the_pseudo_gradient() {
        let cost = DrCost::new(2, &[1.0, 2.0], &[1.0, 1.0]).unwrap();
        let x = dvector![0.3, 1.2, 0.7, 0.1];
        let h = 1e-6;
        for i in 0..4 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let fd = (cost.potential(&xp) - cost.potential(&xm)) / (2.0 * h);
            let g = cost.own_gradient(i / 2, &x, None).unwrap()[i % 2];
            assert!((fd - g).abs() < 1e-7);
        }
    }

    fn small_instance(m: usize, gamma: Vec<f64>, n: usize, seed: u64) -> DRInstance {
        let t = 24;
        let history = synthetic_history(200, t, seed);
        let model = fit_gaussian(&history, Ridge::Auto).unwrap();
        DRInstance {
            m,
            t,
            alpha: vec![500.0; t],
            beta_price: vec![500.0; t],
            gamma,
            demand_samples: sample_profiles(&model, n, seed).unwrap().profiles,
        }
    }

    #[test]
    fn operator_is_strongly_monotone() {
        let inst = small_instance(3, vec![480.0, 420.0, 510.0], 20, 1);
        let game = build_dr_game(&inst).unwrap();
        let op = pseudo_gradient(&game).unwrap();
        let mut rng = stream_rng(2, 0);
        let sampler = || DVector::from_fn(game.n(), |_, _| rng.random_range(0.0..40.0));
        let a = estimate_strong_monotonicity(&*op, sampler, 50).unwrap();
        assert!(a > 0.0);
        assert!(a >= 500.0 - 1e-6);
    }

    #[test]
    fn worst_case_is_smooth_part_plus_max_linear_term() {
        let inst = small_instance(2, vec![450.0, 500.0], 30, 4);
        let game = build_dr_game(&inst).unwrap();
        let samples = inst.samples();
        let mut rng = stream_rng(5, 0);
        let x = DVector::from_fn(48, |_, _| rng.random_range(0.0..40.0));
        for j in 0..2 {
            let w = worst_case_cost(&game, &samples, &x, j).unwrap();
            let own = x.rows(j * 24, 24);
            let smooth = game.cost().value(j, &x, None);
            let brute = samples
                .iter()
                .map(|d| (d * 500.0).dot(&own))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((w.value - (smooth + brute)).abs() <= 1e-9 * w.value.abs());
        }
    }

    #[test]
    fn symmetric_agents_get_identical_allocations_on_active_budgets() {
        let inst = small_instance(2, vec![480.0, 480.0], 40, 6);
        let game = build_dr_game(&inst).unwrap();
        let samples = inst.samples();
        let sre = solve_sampled_robust_eq(&game, &samples, &SreParams::default()).unwrap();
        assert!(sre.converged);
        let (a, b) = (sre.x_sr.rows(0, 24), sre.x_sr.rows(24, 24));
        assert!((a - b).amax() < 1e-6);
        for j in 0..2 {
            let total: f64 = sre.x_sr.rows(j * 24, 24).sum();
            assert!((total - 480.0).abs() < 1e-4, "{total}");
        }
        assert!(sre.x_sr.min() >= -1e-9);
    }

    #[test]
    fn profiles_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let m = synthetic_history(5, 24, 9) * std::f64::consts::FRAC_1_SQRT_2;
        save_profiles(&p, &m).unwrap();
        assert_eq!(load_profiles(&p).unwrap(), m);

        std::fs::write(&p, format!("{}\n", vec!["0"; 24].join(",")).repeat(3)).unwrap();
        assert_eq!(load_profiles(&p).unwrap(), DMatrix::zeros(3, 24));

        let header: Vec<String> = (1..=24).map(|h| format!("h{h}")).collect();
        std::fs::write(&p, format!("{}\n{}\n", header.join(","), vec!["1.5"; 24].join(","))).unwrap();
        assert_eq!(load_profiles(&p).unwrap(), DMatrix::from_element(1, 24, 1.5));

        std::fs::write(&p, format!("{}\n{}\n", vec!["1"; 24].join(","), vec!["1"; 23].join(","))).unwrap();
        assert!(matches!(load_profiles(&p), Err(Error::InconsistentWidth { row: 1, expected: 24, got: 23 })));

        std::fs::write(&p, "1,2\n3,-1\n").unwrap();
        assert!(matches!(load_profiles(&p), Err(Error::NegativeDemand { row: 1, col: 1, .. })));

        std::fs::write(&p, "1,2\n3,x\n").unwrap();
        assert!(matches!(load_profiles(&p), Err(Error::Parse(_))));
    }

    #[test]
    fn gaussian_fit_examples() {
        let same = DMatrix::from_fn(4, 3, |_, c| c as f64 + 1.0);
        let g = fit_gaussian(&same, Ridge::Auto).unwrap();
        assert_eq!(g.mu, dvector![1.0, 2.0, 3.0]);
        assert_eq!(g.sigma, DMatrix::zeros(3, 3));
        let g = fit_gaussian(&same, Ridge::Fixed(0.5)).unwrap();
        assert_eq!(g.sigma, DMatrix::identity(3, 3) * 0.5);

        let two = DMatrix::from_row_slice(2, 3, &[0.0, 0.0, 0.0, 2.0, 2.0, 2.0]);
        let g = fit_gaussian(&two, Ridge::Fixed(0.1)).unwrap();
        assert_eq!(g.mu, dvector![1.0, 1.0, 1.0]);
        // unbiased: ((0-1)^2 + (2-1)^2) / (2-1) = 2 everywhere
        assert_eq!(g.sigma, DMatrix::from_element(3, 3, 2.0) + DMatrix::identity(3, 3) * 0.1);

        let h = synthetic_history(50, 24, 1);
        let g = fit_gaussian(&h, Ridge::Auto).unwrap();
        for c in 0..24 {
            let mean = h.column(c).sum() / 50.0;
            assert!((g.mu[c] - mean).abs() <= 1e-12 * mean.abs());
        }
        assert!(matches!(fit_gaussian(&h.rows(0, 1).into_owned(), Ridge::Auto), Err(Error::InsufficientData { rows: 1 })));
    }

    #[test]
    fn sampling_examples() {
        let tiny = GaussianModel {
            mu: dvector![10.0, 20.0],
            sigma: DMatrix::identity(2, 2) * 1e-4,
            regularization: 1e-4,
        };
        let s = sample_profiles(&tiny, 500, 1).unwrap();
        let dev: Vec<f64> = s
            .profiles
            .row_iter()
            .flat_map(|r| [(r[0] - 10.0).abs(), (r[1] - 20.0).abs()])
            .collect();
        // 3 sd holds for 99.73% of coordinates; 5 sd for all of them
        assert!(dev.iter().filter(|d| **d <= 3e-2).count() as f64 >= 0.99 * dev.len() as f64);
        assert!(dev.iter().all(|d| *d <= 5e-2));

        let h = synthetic_history(300, 24, 2);
        let model = fit_gaussian(&h, Ridge::Auto).unwrap();
        let n = 100_000;
        let s = sample_profiles(&model, n, 8).unwrap();
        assert_eq!(s.clip_fraction, 0.0);
        for c in 0..24 {
            let mean = s.profiles.column(c).sum() / n as f64;
            let sd = model.sigma[(c, c)].sqrt();
            assert!((mean - model.mu[c]).abs() <= 4.0 * sd / (n as f64).sqrt());
        }
        let again = sample_profiles(&model, 50, 8).unwrap();
        assert_eq!(again.profiles, sample_profiles(&model, 50, 8).unwrap().profiles);

        let singular = GaussianModel {
            mu: dvector![1.0, 1.0],
            sigma: DMatrix::from_element(2, 2, 1.0),
            regularization: 0.0,
        };
        let s = sample_profiles(&singular, 20, 3).unwrap();
        for r in s.profiles.row_iter() {
            assert!((r[0] - r[1]).abs() < 1e-9 || r[0] == 0.0 || r[1] == 0.0);
        }
        let indefinite = GaussianModel {
            mu: dvector![1.0, 1.0],
            sigma: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]),
            regularization: 0.0,
        };
        assert!(matches!(sample_profiles(&indefinite, 2, 0), Err(Error::FactorizationFailure(_))));
    }

    #[test]
    fn truncated_gamma_stays_in_window() {
        let law = TruncatedGaussian::default();
        let mut rng = stream_rng(0, 0);
        let draws: Vec<f64> = (0..2000).map(|_| law.sample(&mut rng).unwrap()).collect();
        assert!(draws.iter().all(|g| (400.0..=560.0).contains(g)));
        let mean = draws.iter().sum::<f64>() / 2000.0;
        assert!((mean - 480.0).abs() < 5.0);
    }

    #[test]
    fn config_round_trip() {
        let json = r#"{"M": 5, "T": 24, "N": 100, "beta": 0.05, "alpha": 500, "beta_price": 500,
            "gamma_law": {"type": "truncated-gaussian", "mean": 480, "sd": 120, "low": 400, "high": 560},
            "data": {"type": "gaussian"}}"#;
        let c: DrConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c, DrConfig::desk(0, 0.05));
        let bad = json.replace("\"N\"", "\"Nn\"");
        assert!(serde_json::from_str::<DrConfig>(&bad).is_err());
    }

    #[test]
    fn desk_experiment_is_consistent() {
        let mut config = DrConfig::desk(3, 0.05);
        config.mc_samples = 20_000;
        let r = run_dr_experiment(&config, Path::new(".")).unwrap();
        assert!(r.support.valid);
        assert!(r.support.s_star <= r.support.dimension);
        assert!(r.equilibrium.budget_slack.iter().all(|s| s.abs() < 1e-4));
        assert!(r.equilibrium.min_entry >= -1e-9);
        for risk in &r.agent_risks {
            assert!(risk.value <= r.aggregate_risk.ci_high);
        }
        assert_eq!(r.dominance, r.agent_risks.iter().all(|v| v.value <= r.certificate.epsilon));
    }
}
