//! Games as variational problems.
//!
//! Two front-ends share one [`GameSpec`]:
//!
//! * uncertain constraints: the Nash equilibrium over the sampled local sets
//!   is the VI of the stacked own-gradient operator over the intersection of
//!   per-sample Cartesian products;
//! * uncertain costs: the sampled robust equilibrium is the Nash equilibrium
//!   of the game with worst-case costs `J_max^j = max_i J^j(.; delta_i)`.
//!
//! Robust equilibria are computed by an outer approximation driven by the
//! worst-case subgradient oracle: each agent's maximum is replaced by the
//! affine pieces of the samples found so far, an epigraph variable per agent
//! turns the model into a smooth monotone VI, and the oracle adds the
//! maximizing sample of every agent until no new one appears. This needs
//! costs whose uncertain part is affine in the agent's own decision
//! ([`CostModel::linear_uncertainty`]). Plain projected subgradient on the
//! set-valued operator is available as [`SreMethod::ProjectedSubgradient`].
//!
//! Internally the epigraph variables are measured in units of
//! [`CostModel::cost_scale`]; reported costs are in the model's own units.

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::risk::Predicate;
use crate::sets::{Constraint, ConvexFunction, ConvexSet, Epigraph, Halfspace, ParametrizedSet, Quadratic};
use crate::vi::{
    estimate_strong_monotonicity, solve_on_set, solve_vi, Algorithm, FnOperator, Operator, ScenarioSet,
    ScenarioVIProblem, SolverParams,
};

/// Relative slack used when comparing a cost with the worst-case level.
pub const TIE_SLACK: f64 = 1e-12;

/// Per-agent costs `J^j(x^j, x^{-j}; delta)`.
///
/// `delta = None` evaluates the uncertainty-free cost (in constraint mode the
/// whole cost; in cost mode the part that does not depend on `delta`).
pub trait CostModel: Send + Sync {
    fn dims(&self) -> &[usize];

    fn value(&self, agent: usize, x: &DVector<f64>, delta: Option<&DVector<f64>>) -> f64;

    /// Gradient with respect to the agent's own block, or `None` if the model
    /// has no gradient oracle.
    fn own_gradient(&self, agent: usize, x: &DVector<f64>, delta: Option<&DVector<f64>>) -> Option<DVector<f64>>;

    /// `(w, kappa)` with `J^j(x; delta) = J^j(x; None) + w . x^j + kappa`, when
    /// the uncertain part has that form.
    fn linear_uncertainty(&self, _agent: usize, _delta: &DVector<f64>) -> Option<(DVector<f64>, f64)> {
        None
    }

    /// `(Q, c, k)` with `J^j(z, anchor^{-j}; delta) = 1/2 z'Qz + c'z + k`, when
    /// the cost is quadratic in the agent's own block.
    fn own_quadratic(
        &self,
        _agent: usize,
        _anchor: &DVector<f64>,
        _delta: &DVector<f64>,
    ) -> Option<(DMatrix<f64>, DVector<f64>, f64)> {
        None
    }

    /// Typical curvature of the costs; operators and epigraph levels are
    /// divided by it.
    fn cost_scale(&self) -> f64 {
        1.0
    }

    /// Strong-monotonicity modulus of the uncertainty-free pseudo-gradient.
    fn strong_monotonicity(&self) -> Option<f64> {
        None
    }

    fn lipschitz(&self) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum UncertaintyMode {
    Constraints,
    Costs,
}

type SetFamily = dyn Fn(&DVector<f64>) -> Result<ConvexSet> + Send + Sync;

/// An agent's local constraint set, fixed or indexed by `delta`.
#[derive(Clone)]
pub enum LocalSets {
    Fixed(ConvexSet),
    Uncertain(Arc<SetFamily>),
}

impl fmt::Debug for LocalSets {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LocalSets::Fixed(s) => f.debug_tuple("Fixed").field(s).finish(),
            LocalSets::Uncertain(_) => f.write_str("Uncertain(..)"),
        }
    }
}

impl LocalSets {
    pub fn uncertain<F>(family: F) -> Self
    where
        F: Fn(&DVector<f64>) -> Result<ConvexSet> + Send + Sync + 'static,
    {
        LocalSets::Uncertain(Arc::new(family))
    }
}

#[derive(Clone)]
pub struct GameSpec {
    cost: Arc<dyn CostModel>,
    local_sets: Vec<LocalSets>,
    mode: UncertaintyMode,
    offsets: Vec<usize>,
}

impl fmt::Debug for GameSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GameSpec")
            .field("dims", &self.dims())
            .field("local_sets", &self.local_sets)
            .field("mode", &self.mode)
            .finish_non_exhaustive()
    }
}

impl GameSpec {
    pub fn new(cost: Arc<dyn CostModel>, local_sets: Vec<LocalSets>, mode: UncertaintyMode) -> Result<Self> {
        let dims = cost.dims().to_vec();
        if dims.is_empty() {
            return Err(Error::InvalidInput("a game needs at least one agent".into()));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidInput("agent dimensions must be positive".into()));
        }
        check_dim(dims.len(), local_sets.len())?;
        for (j, s) in local_sets.iter().enumerate() {
            match s {
                LocalSets::Fixed(set) => check_dim(dims[j], set.dim())?,
                LocalSets::Uncertain(_) if mode == UncertaintyMode::Costs => {
                    return Err(Error::InvalidInput(format!(
                        "agent {j}: local sets must be deterministic when costs are uncertain"
                    )))
                }
                LocalSets::Uncertain(_) => {}
            }
        }
        let mut offsets = vec![0];
        for d in &dims {
            offsets.push(offsets.last().unwrap() + d);
        }
        Ok(GameSpec {
            cost,
            local_sets,
            mode,
            offsets,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.local_sets.len()
    }

    pub fn dims(&self) -> &[usize] {
        self.cost.dims()
    }

    /// Total decision dimension `n`.
    pub fn n(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn mode(&self) -> UncertaintyMode {
        self.mode
    }

    pub fn cost(&self) -> &Arc<dyn CostModel> {
        &self.cost
    }

    pub fn block(&self, agent: usize) -> Range<usize> {
        self.offsets[agent]..self.offsets[agent + 1]
    }

    pub fn own(&self, x: &DVector<f64>, agent: usize) -> DVector<f64> {
        x.rows_range(self.block(agent)).into_owned()
    }

    fn local_set(&self, agent: usize, delta: Option<&DVector<f64>>) -> Result<ConvexSet> {
        match (&self.local_sets[agent], delta) {
            (LocalSets::Fixed(s), _) => Ok(s.clone()),
            (LocalSets::Uncertain(f), Some(d)) => {
                let s = f(d)?;
                check_dim(self.dims()[agent], s.dim())?;
                Ok(s)
            }
            (LocalSets::Uncertain(_), None) => Err(Error::InvalidInput(format!(
                "agent {agent} has an uncertain local set"
            ))),
        }
    }

    /// `X^1 x ... x X^M` for deterministic local sets.
    pub fn local_product(&self) -> Result<ConvexSet> {
        let parts: Vec<ConvexSet> = (0..self.n_agents())
            .map(|j| self.local_set(j, None))
            .collect::<Result<_>>()?;
        ConvexSet::product(&parts)
    }

    fn gradient(&self, agent: usize, x: &DVector<f64>, delta: Option<&DVector<f64>>) -> Result<DVector<f64>> {
        let g = self
            .cost
            .own_gradient(agent, x, delta)
            .ok_or(Error::MissingGradient { agent })?;
        check_dim(self.dims()[agent], g.len())?;
        Ok(g)
    }

    fn check_point(&self, x: &DVector<f64>) -> Result<()> {
        check_dim(self.n(), x.len())
    }
}

/// Stacked own-gradient operator of the uncertainty-free costs.
struct PseudoGradient {
    game: GameSpec,
}

impl Operator for PseudoGradient {
    fn dim(&self) -> usize {
        self.game.n()
    }

    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.game.n());
        for j in 0..self.game.n_agents() {
            let g = self
                .game
                .cost
                .own_gradient(j, x, None)
                .expect("gradient availability checked at assembly");
            out.rows_range_mut(self.game.block(j)).copy_from(&g);
        }
        out
    }

    fn strong_monotonicity(&self) -> Option<f64> {
        self.game.cost.strong_monotonicity()
    }

    fn lipschitz(&self) -> Option<f64> {
        self.game.cost.lipschitz()
    }
}

/// `x -> [grad_{x^j} J^j(x; None)]_j`.
pub fn pseudo_gradient(game: &GameSpec) -> Result<Arc<dyn Operator>> {
    let probe = DVector::zeros(game.n());
    for j in 0..game.n_agents() {
        game.gradient(j, &probe, None)?;
    }
    Ok(Arc::new(PseudoGradient { game: game.clone() }))
}

/// The VI whose solution is the Nash equilibrium under sampled constraints.
///
/// Deterministic local sets become constraints shared by every scenario;
/// scenario `i` is the product of the uncertain local sets at `delta_i`.
pub fn assemble_nash_vi(game: &GameSpec, samples: &[DVector<f64>]) -> Result<ScenarioVIProblem> {
    if game.mode != UncertaintyMode::Constraints {
        return Err(Error::InvalidInput("Nash VI assembly needs uncertain constraints".into()));
    }
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    let n = game.n();
    let op = pseudo_gradient(game)?;
    let mut common = ConvexSet::whole(n);
    for j in 0..game.n_agents() {
        if let LocalSets::Fixed(s) = &game.local_sets[j] {
            common = common.intersect(&s.embed(game.offsets[j], n)?)?;
        }
    }
    let scenarios = samples
        .iter()
        .map(|d| {
            let mut s = ConvexSet::whole(n);
            for j in 0..game.n_agents() {
                if let LocalSets::Uncertain(_) = &game.local_sets[j] {
                    s = s.intersect(&game.local_set(j, Some(d))?.embed(game.offsets[j], n)?)?;
                }
            }
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    ScenarioVIProblem::new_vi(op, scenarios)?.with_common(common)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorstCase {
    pub value: f64,
    #[serde(serialize_with = "crate::util::ser_dvec")]
    pub subgradient: DVector<f64>,
    pub argmax: usize,
}

fn check_cost_mode(game: &GameSpec, samples: &[DVector<f64>]) -> Result<()> {
    if game.mode != UncertaintyMode::Costs {
        return Err(Error::InvalidInput("robust equilibria need uncertain costs".into()));
    }
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    Ok(())
}

fn argmax_cost(game: &GameSpec, samples: &[DVector<f64>], x: &DVector<f64>, agent: usize) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, d) in samples.iter().enumerate() {
        let v = game.cost.value(agent, x, Some(d));
        // strict comparison keeps the lowest index on ties
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// `J_max^j(x)` with the own-gradient of the lowest-index maximizing sample.
pub fn worst_case_cost(game: &GameSpec, samples: &[DVector<f64>], x: &DVector<f64>, agent: usize) -> Result<WorstCase> {
    check_cost_mode(game, samples)?;
    game.check_point(x)?;
    if agent >= game.n_agents() {
        return Err(Error::InvalidInput(format!("no agent {agent}")));
    }
    let (argmax, value) = argmax_cost(game, samples, x, agent);
    let subgradient = game.gradient(agent, x, Some(&samples[argmax]))?;
    Ok(WorstCase {
        value,
        subgradient,
        argmax,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SreMethod {
    /// Outer approximation by worst-case subgradient cuts.
    #[default]
    CuttingPlane,
    /// Projected subgradient with steps `c / k` on the set-valued operator.
    ProjectedSubgradient,
}

#[derive(Debug, Clone)]
pub struct SreParams {
    pub method: SreMethod,
    pub solver: SolverParams,
    /// Pairs used by the strong-monotonicity diagnostic (0 disables it).
    pub monotonicity_pairs: usize,
    pub seed: u64,
}

impl Default for SreParams {
    fn default() -> Self {
        SreParams {
            method: SreMethod::CuttingPlane,
            solver: SolverParams::default(),
            monotonicity_pairs: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RobustEquilibrium {
    #[serde(serialize_with = "crate::util::ser_dvec")]
    pub x_sr: DVector<f64>,
    /// `J_max^j(x_sr)` per agent.
    pub t_sr: Vec<f64>,
    /// Lowest-index maximizing sample per agent.
    pub active_scenarios: Vec<usize>,
    pub method: SreMethod,
    pub iterations: usize,
    pub converged: bool,
    /// Samples carried by the final outer approximation.
    pub cut_samples: Vec<usize>,
}

/// Layout of the epigraph-lifted space: agent blocks `[x^j; t^j]` in order.
#[derive(Debug, Clone)]
pub struct LiftedLayout {
    offsets: Vec<usize>,
    dims: Vec<usize>,
}

impl LiftedLayout {
    fn new(game: &GameSpec) -> Self {
        let mut offsets = vec![0];
        for d in game.dims() {
            offsets.push(offsets.last().unwrap() + d + 1);
        }
        LiftedLayout {
            offsets,
            dims: game.dims().to_vec(),
        }
    }

    /// `n + M`.
    pub fn dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn x_range(&self, agent: usize) -> Range<usize> {
        self.offsets[agent]..self.offsets[agent] + self.dims[agent]
    }

    pub fn t_index(&self, agent: usize) -> usize {
        self.offsets[agent] + self.dims[agent]
    }

    pub fn split(&self, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let m = self.dims.len();
        let n: usize = self.dims.iter().sum();
        let mut x = DVector::zeros(n);
        let mut t = DVector::zeros(m);
        let mut k = 0;
        for j in 0..m {
            for i in self.x_range(j) {
                x[k] = y[i];
                k += 1;
            }
            t[j] = y[self.t_index(j)];
        }
        (x, t)
    }

    pub fn join(&self, x: &DVector<f64>, t: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.dim());
        let mut k = 0;
        for j in 0..self.dims.len() {
            for i in self.x_range(j) {
                y[i] = x[k];
                k += 1;
            }
            y[self.t_index(j)] = t[j];
        }
        y
    }

    fn embed_local(&self, game: &GameSpec) -> Result<ConvexSet> {
        let mut out = ConvexSet::whole(self.dim());
        for j in 0..game.n_agents() {
            out = out.intersect(&game.local_set(j, None)?.embed(self.offsets[j], self.dim())?)?;
        }
        Ok(out)
    }
}

/// The smooth VI over `(x, v)` in which agent `j`'s worst case is modelled by
/// cuts `(w_i - w_bar) . x^j / (s u_j) + (kappa_i - kappa_bar) / (s u_j) <= v^j`,
/// one scenario per sample, with `s` the cost scale, `w_bar` the sample mean
/// and `u_j` the largest `|w_i - w_bar| / s`. The operator is
/// `((grad_{x^j} J^j(x; None) + w_bar^j) / s, u_j)` per agent; the
/// multipliers of the cuts then sum to `u_j` and average the slopes.
///
/// Its `x`-part solves the robust equilibrium, and its scenarios have the
/// same support structure as the epigraph QVI of [`build_epigraph_qvi`]
/// (there `t^j` equals `v^j` plus a function of `x`).
#[derive(Debug, Clone)]
pub struct LiftedVi {
    pub problem: ScenarioVIProblem,
    pub layout: LiftedLayout,
    /// Per agent `(w_bar, kappa_bar)`.
    centers: Vec<(DVector<f64>, f64)>,
    /// Per-agent unit of `v^j`, in cost / `s` units.
    units: Vec<f64>,
    scale: f64,
}

impl LiftedVi {
    /// Recovers `(x, J_max)` where `J_max` is the model's worst-case level
    /// for the samples kept in the problem.
    pub fn levels(&self, game: &GameSpec, y: &DVector<f64>) -> (DVector<f64>, Vec<f64>) {
        let (x, v) = self.layout.split(y);
        let levels = (0..game.n_agents())
            .map(|j| {
                let (wb, kb) = &self.centers[j];
                game.cost.value(j, &x, None) + wb.dot(&game.own(&x, j)) + kb + self.scale * self.units[j] * v[j]
            })
            .collect();
        (x, levels)
    }

    /// The lifted point whose epigraph coordinates sit at `levels`.
    pub fn lift(&self, game: &GameSpec, x: &DVector<f64>, levels: &[f64]) -> DVector<f64> {
        let v = DVector::from_fn(game.n_agents(), |j, _| {
            let (wb, kb) = &self.centers[j];
            (levels[j] - game.cost.value(j, x, None) - wb.dot(&game.own(x, j)) - kb) / (self.scale * self.units[j])
        });
        self.layout.join(x, &v)
    }
}

pub fn build_lifted_vi(game: &GameSpec, samples: &[DVector<f64>]) -> Result<LiftedVi> {
    check_cost_mode(game, samples)?;
    let m = game.n_agents();
    let scale = game.cost.cost_scale();
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidInput(format!("cost scale must be positive, got {scale}")));
    }
    let layout = LiftedLayout::new(game);
    let dim = layout.dim();

    let mut pieces: Vec<Vec<(DVector<f64>, f64)>> = vec![Vec::with_capacity(samples.len()); m];
    for d in samples {
        for (j, p) in pieces.iter_mut().enumerate() {
            let (w, k) = game.cost.linear_uncertainty(j, d).ok_or_else(|| {
                Error::InvalidInput("cost model has no affine uncertainty representation".into())
            })?;
            check_dim(game.dims()[j], w.len())?;
            p.push((w, k));
        }
    }
    let nf = samples.len() as f64;
    let centers: Vec<(DVector<f64>, f64)> = pieces
        .iter()
        .enumerate()
        .map(|(j, p)| {
            let w = p
                .iter()
                .fold(DVector::zeros(game.dims()[j]), |acc, (w, _)| acc + w)
                / nf;
            let k = p.iter().map(|(_, k)| k).sum::<f64>() / nf;
            (w, k)
        })
        .collect();

    // v^j in units of the largest centered cut slope keeps the cut normals O(1)
    let units: Vec<f64> = (0..m)
        .map(|j| {
            let wb = &centers[j].0;
            let u = pieces[j].iter().map(|(w, _)| (w - wb).norm() / scale).fold(0.0, f64::max);
            if u > 0.0 && u.is_finite() {
                u
            } else {
                1.0
            }
        })
        .collect();

    let scenarios = (0..samples.len())
        .map(|i| {
            let mut cons = Vec::with_capacity(m);
            for j in 0..m {
                let (w, k) = &pieces[j][i];
                let (wb, kb) = &centers[j];
                let unit = scale * units[j];
                let mut indices: Vec<usize> = layout.x_range(j).collect();
                let mut coeffs: Vec<f64> = (w - wb).iter().map(|v| v / unit).collect();
                indices.push(layout.t_index(j));
                coeffs.push(-1.0);
                cons.push(Constraint::Halfspace(Halfspace {
                    indices,
                    coeffs,
                    rhs: -(k - kb) / unit,
                }));
            }
            ConvexSet::from_constraints(dim, cons)
        })
        .collect::<Result<Vec<_>>>()?;

    let probe = DVector::zeros(game.n());
    for j in 0..m {
        game.gradient(j, &probe, None)?;
    }
    let g = game.clone();
    let lay = layout.clone();
    let shift: Vec<DVector<f64>> = centers.iter().map(|(w, _)| w.clone()).collect();
    let drive = units.clone();
    let op = FnOperator::new(dim, move |y: &DVector<f64>| {
        let (x, _) = lay.split(y);
        let mut out = DVector::zeros(lay.dim());
        for j in 0..g.n_agents() {
            let gj = g.cost.own_gradient(j, &x, None).expect("checked above") + &shift[j];
            for (k, i) in lay.x_range(j).enumerate() {
                out[i] = gj[k] / scale;
            }
            out[lay.t_index(j)] = drive[j];
        }
        out
    });
    let problem = ScenarioVIProblem::new_vi(Arc::new(op), scenarios)?.with_common(layout.embed_local(game)?)?;
    Ok(LiftedVi {
        problem,
        layout,
        centers,
        units,
        scale,
    })
}

fn monotonicity_diagnostic(game: &GameSpec, samples: &[DVector<f64>], params: &SreParams) -> Result<()> {
    if params.monotonicity_pairs == 0 {
        return Ok(());
    }
    let local = game.local_product()?;
    let n = game.n();
    let center = local.project(&DVector::zeros(n))?;
    let spread = 1.0 + center.amax();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let op = subgradient_operator(game, samples);
    let mut err = None;
    let sampler = || {
        let z = DVector::from_fn(n, |_, _| {
            let e: f64 = StandardNormal.sample(&mut rng);
            e * spread
        });
        match local.project(&(&center + z)) {
            Ok(p) => p,
            Err(e) => {
                err.get_or_insert(e);
                center.clone()
            }
        }
    };
    let alpha_hat = estimate_strong_monotonicity(&op, sampler, params.monotonicity_pairs);
    if let Some(e) = err {
        return Err(e);
    }
    match alpha_hat {
        Ok(a) if a <= 0.0 => Err(Error::NonMonotoneSuspected { alpha_hat: a }),
        Ok(_) | Err(Error::DegeneratePairs) => Ok(()),
        Err(e) => Err(e),
    }
}

/// The set-valued operator `[d_{x^j} J_max^j(x)]_j / s`, one element per call.
fn subgradient_operator(game: &GameSpec, samples: &[DVector<f64>]) -> FnOperator {
    let g = game.clone();
    let s: Vec<DVector<f64>> = samples.to_vec();
    let scale = game.cost.cost_scale();
    let op = FnOperator::subgradient(game.n(), move |x: &DVector<f64>| {
        let mut out = DVector::zeros(g.n());
        for j in 0..g.n_agents() {
            let (i, _) = argmax_cost(&g, &s, x, j);
            let gj = g.gradient(j, x, Some(&s[i])).expect("gradient checked before solving");
            out.rows_range_mut(g.block(j)).copy_from(&(gj / scale));
        }
        out
    });
    match game.cost.strong_monotonicity() {
        Some(a) => op.with_strong_monotonicity(a / scale),
        None => op,
    }
}

fn finish(
    game: &GameSpec,
    samples: &[DVector<f64>],
    x: DVector<f64>,
    method: SreMethod,
    iterations: usize,
    converged: bool,
    cut_samples: Vec<usize>,
) -> RobustEquilibrium {
    let (active_scenarios, t_sr) = (0..game.n_agents()).map(|j| argmax_cost(game, samples, &x, j)).unzip();
    RobustEquilibrium {
        x_sr: x,
        t_sr,
        active_scenarios,
        method,
        iterations,
        converged,
        cut_samples,
    }
}

/// Sampled robust equilibrium.
pub fn solve_sampled_robust_eq(game: &GameSpec, samples: &[DVector<f64>], params: &SreParams) -> Result<RobustEquilibrium> {
    check_cost_mode(game, samples)?;
    let probe = DVector::zeros(game.n());
    for j in 0..game.n_agents() {
        game.gradient(j, &probe, Some(&samples[0]))?;
    }
    monotonicity_diagnostic(game, samples, params)?;
    match params.method {
        SreMethod::CuttingPlane => cutting_plane(game, samples, params),
        SreMethod::ProjectedSubgradient => {
            let local = game.local_product()?;
            let op = subgradient_operator(game, samples);
            let solver = SolverParams {
                algorithm: Algorithm::ProjectedSubgradient,
                ..params.solver.clone()
            };
            let sol = solve_on_set(&op, &local, &solver)?;
            Ok(finish(
                game,
                samples,
                sol.x_star,
                SreMethod::ProjectedSubgradient,
                sol.iterations,
                sol.converged,
                Vec::new(),
            ))
        }
    }
}

fn cutting_plane(game: &GameSpec, samples: &[DVector<f64>], params: &SreParams) -> Result<RobustEquilibrium> {
    let lifted = build_lifted_vi(game, samples)?;
    let local = game.local_product()?;
    let mut x = local.project(&DVector::zeros(game.n()))?;
    let mut kept: Vec<usize> = Vec::new();
    let mut y: Option<DVector<f64>> = None;
    let mut iterations = 0;
    for _ in 0..=samples.len() {
        let mut added = false;
        for j in 0..game.n_agents() {
            let (i, value) = argmax_cost(game, samples, &x, j);
            if kept.binary_search(&i).is_ok() {
                continue;
            }
            // a new sample matters only if it beats the current model
            let model = kept
                .iter()
                .map(|&k| game.cost.value(j, &x, Some(&samples[k])))
                .fold(f64::NEG_INFINITY, f64::max);
            if kept.is_empty() || value > model + TIE_SLACK * model.abs().max(1.0) {
                let pos = kept.binary_search(&i).unwrap_err();
                kept.insert(pos, i);
                added = true;
            }
        }
        if !added && y.is_some() {
            break;
        }
        let sub = lifted.problem.subproblem(&kept);
        let mut solver = params.solver.clone();
        if let Some(prev) = &y {
            solver.x0 = Some(prev.clone());
        }
        let sol = solve_vi(&sub, &solver)?;
        iterations += sol.iterations;
        if !sol.converged {
            let (xs, _) = lifted.levels(game, &sol.x_star);
            return Ok(finish(game, samples, xs, SreMethod::CuttingPlane, iterations, false, kept));
        }
        x = lifted.layout.split(&sol.x_star).0;
        y = Some(sol.x_star);
    }
    Ok(finish(game, samples, x, SreMethod::CuttingPlane, iterations, true, kept))
}

/// `h(z) = J^j(z, anchor^{-j}; delta) / u - c` as an epigraph oracle.
struct AnchoredCost {
    game: GameSpec,
    agent: usize,
    anchor: DVector<f64>,
    delta: DVector<f64>,
    scale: f64,
    offset: f64,
}

impl AnchoredCost {
    fn point(&self, z: &[f64]) -> DVector<f64> {
        let mut x = self.anchor.clone();
        x.rows_range_mut(self.game.block(self.agent)).copy_from_slice(z);
        x
    }
}

impl ConvexFunction for AnchoredCost {
    fn dim(&self) -> usize {
        self.game.dims()[self.agent]
    }

    fn value(&self, z: &[f64]) -> f64 {
        self.game.cost.value(self.agent, &self.point(z), Some(&self.delta)) / self.scale - self.offset
    }

    fn gradient(&self, z: &[f64]) -> Vec<f64> {
        let g = self
            .game
            .cost
            .own_gradient(self.agent, &self.point(z), Some(&self.delta))
            .expect("gradient checked at construction");
        g.iter().map(|v| v / self.scale).collect()
    }
}

/// The epigraph QVI over `y = (x^1, t^1, ..., x^M, t^M)`.
///
/// Scenario `i` at anchor `y_bar` is `prod_j {J^j(x^j, x_bar^{-j}; delta_i) <= u (t^j + c_j)}`
/// and the operator is the constant `1_M ⊗ [0_m; 1]`. Levels are measured in
/// a common unit `u`, the mean own-gradient norm at a feasible reference
/// point, which keeps the constraint normals of order one. The offsets `c_j`
/// only shift `t` (the operator is constant in it) so that level coordinates
/// stay near zero when costs are large. [`EpigraphQvi::levels`] converts back.
#[derive(Debug, Clone)]
pub struct EpigraphQvi {
    pub problem: ScenarioVIProblem,
    pub layout: LiftedLayout,
    offsets: Vec<f64>,
    unit: f64,
}

impl EpigraphQvi {
    /// `(x, levels)` with `levels^j` in cost units.
    pub fn levels(&self, y: &DVector<f64>) -> (DVector<f64>, Vec<f64>) {
        let (x, t) = self.layout.split(y);
        let levels = (0..t.len()).map(|j| self.unit * (t[j] + self.offsets[j])).collect();
        (x, levels)
    }

    pub fn lift(&self, x: &DVector<f64>, levels: &[f64]) -> DVector<f64> {
        let t = DVector::from_fn(levels.len(), |j, _| levels[j] / self.unit - self.offsets[j]);
        self.layout.join(x, &t)
    }
}

pub fn build_epigraph_qvi(game: &GameSpec, samples: &[DVector<f64>]) -> Result<EpigraphQvi> {
    check_cost_mode(game, samples)?;
    let layout = LiftedLayout::new(game);
    let dim = layout.dim();
    let m = game.n_agents();
    let x0 = game.local_product()?.project(&DVector::zeros(game.n()))?;
    let mut norm = 0.0;
    for j in 0..m {
        for d in samples {
            norm += game.gradient(j, &x0, Some(d))?.norm();
        }
    }
    norm /= (m * samples.len()) as f64;
    let unit = if norm > 0.0 && norm.is_finite() { norm } else { 1.0 };
    let offsets: Vec<f64> = (0..m)
        .map(|j| samples.iter().map(|d| game.cost.value(j, &x0, Some(d))).sum::<f64>() / samples.len() as f64 / unit)
        .collect();
    let scenarios = samples
        .iter()
        .map(|d| {
            let g = game.clone();
            let lay = layout.clone();
            let delta = d.clone();
            let offsets = offsets.clone();
            ScenarioSet::Parametrized(ParametrizedSet::new(dim, move |y: &DVector<f64>| {
                let (x, _) = lay.split(y);
                let mut cons = Vec::with_capacity(g.n_agents());
                for j in 0..g.n_agents() {
                    let mut xi: Vec<usize> = lay.x_range(j).collect();
                    let t = lay.t_index(j);
                    let u = unit;
                    cons.push(match g.cost.own_quadratic(j, &x, &delta) {
                        Some((q, c, k)) => {
                            let m = xi.len();
                            let qs = DMatrix::from_fn(m + 1, m + 1, |a, b| {
                                if a < m && b < m {
                                    q[(a, b)] / u
                                } else {
                                    0.0
                                }
                            });
                            let cs = DVector::from_fn(m + 1, |a, _| if a < m { c[a] / u } else { -1.0 });
                            xi.push(t);
                            Constraint::Quadratic(Quadratic::new(xi, qs, cs, offsets[j] - k / u)?)
                        }
                        None => Constraint::Epigraph(Epigraph {
                            x_indices: xi,
                            t_index: t,
                            func: Arc::new(AnchoredCost {
                                game: g.clone(),
                                agent: j,
                                anchor: x.clone(),
                                delta: delta.clone(),
                                scale: u,
                                offset: offsets[j],
                            }),
                        }),
                    });
                }
                ConvexSet::from_constraints(dim, cons)
            }))
        })
        .collect();
    let mut ones = DVector::zeros(dim);
    for j in 0..m {
        ones[layout.t_index(j)] = 1.0;
    }
    let op = FnOperator::new(dim, move |_: &DVector<f64>| ones.clone());
    let problem = ScenarioVIProblem::new_qvi(Arc::new(op), scenarios)?.with_common(layout.embed_local(game)?)?;
    Ok(EpigraphQvi {
        problem,
        layout,
        offsets,
        unit,
    })
}

/// The event whose probability is agent `j`'s risk at `x`.
///
/// Uncertain costs: `J^j(x; delta) >= J_max^j(x)` with the level frozen at
/// the samples (a relative slack of [`TIE_SLACK`] absorbs rounding).
/// Uncertain constraints: `x^j` outside `X^j_delta`.
pub fn agent_risk_spec(game: &GameSpec, samples: &[DVector<f64>], x: &DVector<f64>, agent: usize) -> Result<Predicate> {
    game.check_point(x)?;
    if agent >= game.n_agents() {
        return Err(Error::InvalidInput(format!("no agent {agent}")));
    }
    let g = game.clone();
    let x = x.clone();
    match game.mode {
        UncertaintyMode::Costs => {
            let level = worst_case_cost(game, samples, &x, agent)?.value;
            let threshold = level - TIE_SLACK * level.abs().max(1.0);
            Ok(Arc::new(move |d: &DVector<f64>| g.cost.value(agent, &x, Some(d)) >= threshold))
        }
        UncertaintyMode::Constraints => {
            let own = game.own(&x, agent);
            Ok(Arc::new(move |d: &DVector<f64>| match g.local_set(agent, Some(d)) {
                Ok(set) => !set.contains(&own, 0.0).unwrap_or(false),
                Err(_) => true,
            }))
        }
    }
}

/// The union over agents of the per-agent events (risk of the lifted point).
pub fn aggregate_risk_spec(game: &GameSpec, samples: &[DVector<f64>], x: &DVector<f64>) -> Result<Predicate> {
    let parts: Vec<Predicate> = (0..game.n_agents())
        .map(|j| agent_risk_spec(game, samples, x, j))
        .collect::<Result<_>>()?;
    Ok(Arc::new(move |d: &DVector<f64>| parts.iter().any(|p| p(d))))
}

/// `J^j = 1/2 x^j' A_jj x^j + x^j' sum_{k != j} A_jk x^k + (c + E delta)_j . x^j`.
///
/// The pseudo-gradient is `A x + c + E delta`.
#[derive(Debug, Clone)]
pub struct AffineQuadraticCost {
    dims: Vec<usize>,
    offsets: Vec<usize>,
    a: DMatrix<f64>,
    c: DVector<f64>,
    e: Option<DMatrix<f64>>,
    alpha: Option<f64>,
    lipschitz: f64,
}

impl AffineQuadraticCost {
    pub fn new(dims: Vec<usize>, a: DMatrix<f64>, c: DVector<f64>, e: Option<DMatrix<f64>>) -> Result<Self> {
        let n: usize = dims.iter().sum();
        check_dim(n, a.nrows())?;
        check_dim(n, a.ncols())?;
        check_dim(n, c.len())?;
        if let Some(e) = &e {
            check_dim(n, e.nrows())?;
        }
        let mut offsets = vec![0];
        for d in &dims {
            offsets.push(offsets.last().unwrap() + d);
        }
        for j in 0..dims.len() {
            let r = offsets[j]..offsets[j + 1];
            let block = a.view((r.start, r.start), (r.len(), r.len()));
            if (block - block.transpose()).amax() > 1e-12 * (1.0 + block.amax()) {
                return Err(Error::InvalidInput(format!("own block of agent {j} is not symmetric")));
            }
            if block.into_owned().symmetric_eigenvalues().min() < -1e-12 {
                return Err(Error::InvalidInput(format!("cost of agent {j} is not convex in its own block")));
            }
        }
        let sym = (&a + a.transpose()) * 0.5;
        let min_eig = sym.symmetric_eigenvalues().min();
        let lipschitz = a.singular_values().max();
        Ok(AffineQuadraticCost {
            dims,
            offsets,
            a,
            c,
            e,
            alpha: (min_eig > 0.0).then_some(min_eig),
            lipschitz,
        })
    }

    fn range(&self, j: usize) -> Range<usize> {
        self.offsets[j]..self.offsets[j + 1]
    }

    fn shift(&self, j: usize, delta: Option<&DVector<f64>>) -> DVector<f64> {
        let r = self.range(j);
        match (&self.e, delta) {
            (Some(e), Some(d)) => e.rows_range(r) * d,
            _ => DVector::zeros(r.len()),
        }
    }
}

impl CostModel for AffineQuadraticCost {
    fn dims(&self) -> &[usize] {
        &self.dims
    }

    fn value(&self, j: usize, x: &DVector<f64>, delta: Option<&DVector<f64>>) -> f64 {
        let r = self.range(j);
        let xj = x.rows_range(r.clone());
        let ajj = self.a.view((r.start, r.start), (r.len(), r.len()));
        let row = self.a.rows_range(r.clone()) * x - ajj * xj;
        0.5 * xj.dot(&(ajj * xj)) + xj.dot(&row) + xj.dot(&(self.c.rows_range(r.clone()) + self.shift(j, delta)))
    }

    fn own_gradient(&self, j: usize, x: &DVector<f64>, delta: Option<&DVector<f64>>) -> Option<DVector<f64>> {
        let r = self.range(j);
        Some(self.a.rows_range(r.clone()) * x + self.c.rows_range(r.clone()) + self.shift(j, delta))
    }

    fn linear_uncertainty(&self, j: usize, delta: &DVector<f64>) -> Option<(DVector<f64>, f64)> {
        Some((self.shift(j, Some(delta)), 0.0))
    }

    fn own_quadratic(
        &self,
        j: usize,
        anchor: &DVector<f64>,
        delta: &DVector<f64>,
    ) -> Option<(DMatrix<f64>, DVector<f64>, f64)> {
        let r = self.range(j);
        let ajj = self.a.view((r.start, r.start), (r.len(), r.len())).into_owned();
        let lin = self.a.rows_range(r.clone()) * anchor - &ajj * anchor.rows_range(r.clone())
            + self.c.rows_range(r.clone())
            + self.shift(j, Some(delta));
        Some((ajj, lin, 0.0))
    }

    fn strong_monotonicity(&self) -> Option<f64> {
        self.alpha
    }

    fn lipschitz(&self) -> Option<f64> {
        self.alpha.map(|_| self.lipschitz)
    }
}
