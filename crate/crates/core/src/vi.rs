//! Sampled variational and quasi-variational inequalities.
//!
//! Find `x*` in `X = X_1 ∩ ... ∩ X_N` with `F(x*) . (x - x*) >= 0` for all
//! `x` in `X`. In QVI mode each `X_i` depends on the solution itself and the
//! problem is solved by a damped fixed point over anchored VIs.
//!
//! Solver choice follows the information the operator declares:
//!
//! * strong monotonicity `alpha` and Lipschitz constant `L`: projected
//!   gradient with the constant step `alpha / L^2`;
//! * smooth otherwise: extragradient with a step that backtracks on the
//!   local Lipschitz ratio and grows after easy iterations;
//! * subgradient oracle only: projected subgradient with steps `c / k`.
//!
//! All three start from the projection of the origin (or a warm start) and
//! are deterministic.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::sets::{ConvexSet, ParametrizedSet, ProjectionParams, PROJ_TOL};

pub const SMOOTH_TOL: f64 = 1e-7;
pub const SUBGRADIENT_TOL: f64 = 1e-5;
pub const MAX_ITER: usize = 1_000_000;
pub const QVI_DAMPING: f64 = 0.5;
pub const QVI_MAX_OUTER: usize = 500;

/// Extragradient acceptance ratio `gamma |F(x) - F(y)| <= NU |x - y|`.
const NU: f64 = 0.9;
const STEP_GROWTH: f64 = 1.5;
const STEP_CAP: f64 = 1e6;
/// Step growth stops once `gamma |F(x)|` exceeds this multiple of `1 + |x|`.
const STEP_REACH: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperatorKind {
    /// `eval` is a continuous single-valued operator.
    Smooth,
    /// `eval` returns one element of a set-valued monotone operator.
    Subgradient,
}

pub trait Operator: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &DVector<f64>) -> DVector<f64>;

    fn kind(&self) -> OperatorKind {
        OperatorKind::Smooth
    }

    fn strong_monotonicity(&self) -> Option<f64> {
        None
    }

    fn lipschitz(&self) -> Option<f64> {
        None
    }
}

/// `F(x) = A x + b`.
#[derive(Debug, Clone)]
pub struct AffineOperator {
    a: DMatrix<f64>,
    b: DVector<f64>,
    alpha: Option<f64>,
    lipschitz: f64,
}

impl AffineOperator {
    /// Declares `alpha` (smallest eigenvalue of the symmetric part) when it is
    /// positive, and `L` as the largest singular value.
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::DimensionMismatch {
                expected: a.nrows(),
                got: a.ncols(),
            });
        }
        check_dim(a.nrows(), b.len())?;
        let sym = (&a + a.transpose()) * 0.5;
        let min_eig = sym
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let lipschitz = a.singular_values().iter().cloned().fold(0.0, f64::max);
        let alpha = (a.nrows() > 0 && min_eig > 1e-12 * lipschitz.max(1.0)).then_some(min_eig);
        Ok(AffineOperator {
            a,
            b,
            alpha,
            lipschitz,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.b
    }
}

impl Operator for AffineOperator {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b
    }

    fn strong_monotonicity(&self) -> Option<f64> {
        self.alpha
    }

    fn lipschitz(&self) -> Option<f64> {
        self.alpha.map(|_| self.lipschitz)
    }
}

type OperatorFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;

/// Operator given by a closure, with optional declarations.
#[derive(Clone)]
pub struct FnOperator {
    dim: usize,
    f: Arc<OperatorFn>,
    kind: OperatorKind,
    alpha: Option<f64>,
    lipschitz: Option<f64>,
}

impl fmt::Debug for FnOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnOperator")
            .field("dim", &self.dim)
            .field("kind", &self.kind)
            .field("alpha", &self.alpha)
            .field("lipschitz", &self.lipschitz)
            .finish_non_exhaustive()
    }
}

impl FnOperator {
    pub fn new<F>(dim: usize, f: F) -> Self
    where
        F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        FnOperator {
            dim,
            f: Arc::new(f),
            kind: OperatorKind::Smooth,
            alpha: None,
            lipschitz: None,
        }
    }

    pub fn subgradient<F>(dim: usize, f: F) -> Self
    where
        F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        FnOperator {
            kind: OperatorKind::Subgradient,
            ..FnOperator::new(dim, f)
        }
    }

    /// Declares `(alpha, L)`; requires `0 < alpha <= L`.
    pub fn with_constants(mut self, alpha: f64, lipschitz: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= lipschitz) {
            return Err(Error::InvalidInput(format!(
                "declared constants must satisfy 0 < alpha <= L, got alpha={alpha}, L={lipschitz}"
            )));
        }
        self.alpha = Some(alpha);
        self.lipschitz = Some(lipschitz);
        Ok(self)
    }

    pub fn with_strong_monotonicity(mut self, alpha: f64) -> Self {
        self.alpha = Some(alpha);
        self
    }
}

impl Operator for FnOperator {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.f)(x)
    }

    fn kind(&self) -> OperatorKind {
        self.kind
    }

    fn strong_monotonicity(&self) -> Option<f64> {
        self.alpha
    }

    fn lipschitz(&self) -> Option<f64> {
        self.lipschitz
    }
}

/// A scenario constraint set, possibly depending on an anchor point.
#[derive(Debug, Clone)]
pub enum ScenarioSet {
    Fixed(ConvexSet),
    Parametrized(ParametrizedSet),
}

impl ScenarioSet {
    pub fn dim(&self) -> usize {
        match self {
            ScenarioSet::Fixed(s) => s.dim(),
            ScenarioSet::Parametrized(p) => p.dim(),
        }
    }

    pub fn at(&self, anchor: &DVector<f64>) -> Result<ConvexSet> {
        match self {
            ScenarioSet::Fixed(s) => Ok(s.clone()),
            ScenarioSet::Parametrized(p) => p.at(anchor),
        }
    }
}

impl From<ConvexSet> for ScenarioSet {
    fn from(s: ConvexSet) -> Self {
        ScenarioSet::Fixed(s)
    }
}

impl From<ParametrizedSet> for ScenarioSet {
    fn from(p: ParametrizedSet) -> Self {
        ScenarioSet::Parametrized(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Vi,
    Qvi,
}

/// The sampled problem: an operator, `N` scenario sets and optional
/// deterministic constraints that no scenario removal touches.
#[derive(Clone)]
pub struct ScenarioVIProblem {
    operator: Arc<dyn Operator>,
    scenarios: Vec<ScenarioSet>,
    common: Vec<ScenarioSet>,
    mode: Mode,
}

impl fmt::Debug for ScenarioVIProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScenarioVIProblem")
            .field("dim", &self.dim())
            .field("scenarios", &self.scenarios.len())
            .field("common", &self.common.len())
            .field("mode", &self.mode)
            .finish()
    }
}

impl ScenarioVIProblem {
    pub fn new_vi(operator: Arc<dyn Operator>, scenarios: Vec<ConvexSet>) -> Result<Self> {
        Self::new(
            operator,
            scenarios.into_iter().map(ScenarioSet::Fixed).collect(),
            Mode::Vi,
        )
    }

    pub fn new_qvi(operator: Arc<dyn Operator>, scenarios: Vec<ScenarioSet>) -> Result<Self> {
        Self::new(operator, scenarios, Mode::Qvi)
    }

    fn new(operator: Arc<dyn Operator>, scenarios: Vec<ScenarioSet>, mode: Mode) -> Result<Self> {
        if scenarios.is_empty() {
            return Err(Error::EmptySamples);
        }
        let n = operator.dim();
        for s in &scenarios {
            check_dim(n, s.dim())?;
            if mode == Mode::Vi && matches!(s, ScenarioSet::Parametrized(_)) {
                return Err(Error::InvalidInput(
                    "parametrized scenario sets require QVI mode".into(),
                ));
            }
        }
        Ok(ScenarioVIProblem {
            operator,
            scenarios,
            common: Vec::new(),
            mode,
        })
    }

    /// Adds constraints shared by every scenario (never removed by support analysis).
    pub fn with_common(mut self, set: impl Into<ScenarioSet>) -> Result<Self> {
        let set = set.into();
        check_dim(self.dim(), set.dim())?;
        if self.mode == Mode::Vi && matches!(set, ScenarioSet::Parametrized(_)) {
            return Err(Error::InvalidInput(
                "parametrized sets require QVI mode".into(),
            ));
        }
        self.common.push(set);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.operator.dim()
    }

    pub fn n_scenarios(&self) -> usize {
        self.scenarios.len()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn operator(&self) -> &Arc<dyn Operator> {
        &self.operator
    }

    pub fn scenarios(&self) -> &[ScenarioSet] {
        &self.scenarios
    }

    /// The same problem keeping only the scenarios listed in `keep`
    /// (which may be empty).
    pub fn subproblem(&self, keep: &[usize]) -> ScenarioVIProblem {
        ScenarioVIProblem {
            operator: self.operator.clone(),
            scenarios: keep.iter().map(|&i| self.scenarios[i].clone()).collect(),
            common: self.common.clone(),
            mode: self.mode,
        }
    }

    /// The problem with scenario `i` removed.
    pub fn without(&self, i: usize) -> ScenarioVIProblem {
        let keep: Vec<usize> = (0..self.n_scenarios()).filter(|&k| k != i).collect();
        self.subproblem(&keep)
    }

    /// `X` (VI mode) or `X(anchor)` (QVI mode).
    pub fn feasible_set(&self, anchor: &DVector<f64>) -> Result<ConvexSet> {
        let n = self.dim();
        check_dim(n, anchor.len())?;
        let sets: Vec<ConvexSet> = self
            .common
            .iter()
            .chain(&self.scenarios)
            .map(|s| s.at(anchor))
            .collect::<Result<_>>()?;
        ConvexSet::intersect_all(n, sets.iter())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Algorithm {
    /// Pick from the operator's declarations.
    #[default]
    Auto,
    ProjectedGradient,
    Extragradient,
    ProjectedSubgradient,
}

#[derive(Debug, Clone)]
pub struct SolverParams {
    /// Natural-residual tolerance; defaults by operator kind.
    pub tol: Option<f64>,
    pub max_iter: usize,
    pub projection: ProjectionParams,
    pub algorithm: Algorithm,
    /// Warm start; projected onto the feasible set before use.
    pub x0: Option<DVector<f64>>,
    /// Subgradient step numerator `c`; defaults to `1 / alpha`.
    pub subgradient_c: Option<f64>,
    pub qvi_damping: f64,
    pub qvi_max_outer: usize,
    /// Outer QVI tolerance on `|x_k - VI(x_k)|`; defaults to the VI tolerance.
    pub qvi_tol: Option<f64>,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            tol: None,
            max_iter: MAX_ITER,
            projection: ProjectionParams::default(),
            algorithm: Algorithm::Auto,
            x0: None,
            subgradient_c: None,
            qvi_damping: QVI_DAMPING,
            qvi_max_outer: QVI_MAX_OUTER,
            qvi_tol: None,
        }
    }
}

impl SolverParams {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = Some(tol);
        self
    }

    pub fn warm_start(mut self, x0: DVector<f64>) -> Self {
        self.x0 = Some(x0);
        self
    }

    fn tol_for(&self, kind: OperatorKind) -> f64 {
        self.tol.unwrap_or(match kind {
            OperatorKind::Smooth => SMOOTH_TOL,
            OperatorKind::Subgradient => SUBGRADIENT_TOL,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Solution {
    #[serde(rename = "x", serialize_with = "crate::util::ser_dvec")]
    pub x_star: DVector<f64>,
    /// `|x - P_X(x - F(x))|` for smooth operators. For subgradient operators,
    /// the last iterate displacement, which is what vanishes along `c/k` steps.
    #[serde(rename = "residual")]
    pub natural_residual: f64,
    pub iterations: usize,
    pub feasibility_violation: f64,
    pub converged: bool,
}

impl Solution {
    pub fn require_converged(self) -> Result<Solution> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NotConverged {
                iterations: self.iterations,
                residual: self.natural_residual,
            })
        }
    }
}

/// `|x - P_X(x - gamma F(x))| / gamma`, with `X` anchored at `x` in QVI mode.
pub fn natural_residual(problem: &ScenarioVIProblem, x: &DVector<f64>, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidInput(format!("gamma must be positive, got {gamma}")));
    }
    let set = problem.feasible_set(x)?;
    residual_on(&*problem.operator, &set, x, gamma, &ProjectionParams::default())
}

fn residual_on(
    op: &dyn Operator,
    set: &ConvexSet,
    x: &DVector<f64>,
    gamma: f64,
    proj: &ProjectionParams,
) -> Result<f64> {
    let y = set.project_with(&(x - op.eval(x) * gamma), proj)?;
    Ok((x - y).norm() / gamma)
}

/// Solves the VI over a fixed set.
pub fn solve_on_set(op: &dyn Operator, set: &ConvexSet, params: &SolverParams) -> Result<Solution> {
    let n = op.dim();
    check_dim(n, set.dim())?;
    let proj = &params.projection;
    let start = match &params.x0 {
        Some(x0) => {
            check_dim(n, x0.len())?;
            set.project_with(x0, proj)?
        }
        None => set.project_with(&DVector::zeros(n), proj)?,
    };
    let algorithm = match params.algorithm {
        Algorithm::Auto => match (op.kind(), op.strong_monotonicity(), op.lipschitz()) {
            (OperatorKind::Subgradient, _, _) => Algorithm::ProjectedSubgradient,
            (OperatorKind::Smooth, Some(_), Some(_)) => Algorithm::ProjectedGradient,
            _ => Algorithm::Extragradient,
        },
        a => a,
    };
    let tol = params.tol_for(op.kind());
    let (x, residual, iterations, converged) = match algorithm {
        Algorithm::ProjectedGradient => {
            let (alpha, l) = match (op.strong_monotonicity(), op.lipschitz()) {
                (Some(a), Some(l)) if a > 0.0 && l >= a => (a, l),
                _ => {
                    return Err(Error::InvalidInput(
                        "projected gradient needs declared 0 < alpha <= L".into(),
                    ))
                }
            };
            projected_gradient(op, set, start, alpha / (l * l), tol, params)?
        }
        Algorithm::Extragradient => extragradient(op, set, start, tol, params)?,
        Algorithm::ProjectedSubgradient => {
            let c = match params.subgradient_c.or(op.strong_monotonicity().map(|a| 1.0 / a)) {
                Some(c) if c > 0.0 => c,
                _ => {
                    return Err(Error::InvalidInput(
                        "projected subgradient needs a step constant or a declared modulus".into(),
                    ))
                }
            };
            projected_subgradient(op, set, start, c, tol, params)?
        }
        Algorithm::Auto => unreachable!(),
    };
    let feasibility_violation = set.violation(&x)?;
    Ok(Solution {
        x_star: x,
        natural_residual: residual,
        iterations,
        feasibility_violation,
        converged: converged && feasibility_violation <= 10.0 * proj.tol.max(PROJ_TOL),
    })
}

type Run = (DVector<f64>, f64, usize, bool);

/// Exact residual check once the cheap bound `max(1, 1/gamma) |x - y|` is small.
fn confirm(op: &dyn Operator, set: &ConvexSet, x: &DVector<f64>, tol: f64, p: &ProjectionParams) -> Result<Option<f64>> {
    let r = residual_on(op, set, x, 1.0, p)?;
    Ok((r <= tol).then_some(r))
}

fn projected_gradient(
    op: &dyn Operator,
    set: &ConvexSet,
    mut x: DVector<f64>,
    gamma: f64,
    tol: f64,
    params: &SolverParams,
) -> Result<Run> {
    let p = &params.projection;
    let bound = gamma.recip().max(1.0);
    let mut best = (x.clone(), f64::INFINITY);
    for k in 1..=params.max_iter {
        let y = set.project_with(&(&x - op.eval(&x) * gamma), p)?;
        let step = (&x - &y).norm();
        if step * bound <= tol || step <= tol {
            if let Some(r) = confirm(op, set, &x, tol, p)? {
                return Ok((x, r, k, true));
            }
        }
        if step * bound < best.1 {
            best = (x.clone(), step * bound);
        }
        x = y;
    }
    let r = residual_on(op, set, &best.0, 1.0, p)?;
    Ok((best.0, r, params.max_iter, false))
}

fn extragradient(
    op: &dyn Operator,
    set: &ConvexSet,
    mut x: DVector<f64>,
    tol: f64,
    params: &SolverParams,
) -> Result<Run> {
    let p = &params.projection;
    let mut gamma = op.lipschitz().map_or(1.0, |l| 1.0 / l);
    let mut fx = op.eval(&x);
    let mut best = (x.clone(), f64::INFINITY);
    for k in 1..=params.max_iter {
        let (fy, dxy, ratio) = loop {
            let y = set.project_with(&(&x - &fx * gamma), p)?;
            let fy = op.eval(&y);
            let dxy = (&x - &y).norm();
            let df = (&fx - &fy).norm();
            if dxy == 0.0 || gamma * df <= NU * dxy {
                let ratio = if dxy == 0.0 { 0.0 } else { gamma * df / dxy };
                break (fy, dxy, ratio);
            }
            gamma = (0.9 * NU * dxy / df).min(0.5 * gamma);
        };
        let bound = dxy * gamma.recip().max(1.0);
        if bound <= tol || dxy <= tol {
            if let Some(r) = confirm(op, set, &x, tol, p)? {
                return Ok((x, r, k, true));
            }
        }
        if bound < best.1 {
            best = (x.clone(), bound);
        }
        x = set.project_with(&(&x - &fy * gamma), p)?;
        fx = op.eval(&x);
        if ratio <= 0.5 * NU {
            // projections of far-away points lose digits in proportion to the distance
            let reach = STEP_REACH * (1.0 + x.norm()) / fx.norm().max(f64::MIN_POSITIVE);
            gamma = (gamma * STEP_GROWTH).min(STEP_CAP).min(reach.max(gamma));
        }
    }
    let r = residual_on(op, set, &best.0, 1.0, p)?;
    Ok((best.0, r, params.max_iter, false))
}

fn projected_subgradient(
    op: &dyn Operator,
    set: &ConvexSet,
    mut x: DVector<f64>,
    c: f64,
    tol: f64,
    params: &SolverParams,
) -> Result<Run> {
    let p = &params.projection;
    let mut last = f64::INFINITY;
    for k in 1..=params.max_iter {
        let step = c / k as f64;
        let y = set.project_with(&(&x - op.eval(&x) * step), p)?;
        last = (&y - &x).norm();
        x = y;
        if last <= tol {
            return Ok((x, last, k, true));
        }
    }
    Ok((x, last, params.max_iter, false))
}

/// Solves a problem in VI mode (or a QVI through [`solve_qvi`]).
pub fn solve_vi(problem: &ScenarioVIProblem, params: &SolverParams) -> Result<Solution> {
    match problem.mode {
        Mode::Vi => {
            let set = problem.feasible_set(&DVector::zeros(problem.dim()))?;
            solve_on_set(&*problem.operator, &set, params)
        }
        Mode::Qvi => solve_qvi(problem, params),
    }
}

/// Damped anchored fixed point `x <- (1 - theta) x + theta VI(X(x))`.
///
/// Returns the last inner solution; `converged` requires the inner solve to
/// converge and the inner solution to lie within `qvi_tol` of its anchor.
pub fn solve_qvi(problem: &ScenarioVIProblem, params: &SolverParams) -> Result<Solution> {
    let n = problem.dim();
    let theta = params.qvi_damping;
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::InvalidInput(format!("damping must lie in (0,1], got {theta}")));
    }
    let tol = params.tol_for(problem.operator.kind());
    let outer_tol = params.qvi_tol.unwrap_or(tol);
    let mut anchor = match &params.x0 {
        Some(x0) => {
            check_dim(n, x0.len())?;
            x0.clone()
        }
        None => problem
            .feasible_set(&DVector::zeros(n))?
            .project_with(&DVector::zeros(n), &params.projection)?,
    };
    let mut total = 0;
    let mut last = None;
    let mut working = Vec::new();
    for _ in 0..params.qvi_max_outer {
        let inner = SolverParams {
            x0: Some(anchor.clone()),
            tol: Some(tol * 0.1),
            ..params.clone()
        };
        let sol = solve_generated(problem, &anchor, &mut working, &inner)?;
        total += sol.iterations;
        let gap = (&sol.x_star - &anchor).norm();
        let done = gap <= outer_tol && sol.converged;
        anchor = &anchor * (1.0 - theta) + &sol.x_star * theta;
        last = Some(sol);
        if done {
            let mut s = last.unwrap();
            s.iterations = total;
            return Ok(s);
        }
    }
    let mut s = last.expect("at least one outer iteration");
    s.iterations = total;
    s.converged = false;
    Ok(s)
}

/// Solves the VI over `X(anchor)` by scenario generation.
///
/// The VI is solved over the common sets and the `working` scenarios only;
/// scenarios violated by that solution join `working` and the solve repeats
/// from the last point. A solution over a relaxation that is feasible for the
/// full set solves the full VI, so the result is exact while projections only
/// see the few scenarios that matter. `working` persists across calls.
fn solve_generated(
    problem: &ScenarioVIProblem,
    anchor: &DVector<f64>,
    working: &mut Vec<usize>,
    params: &SolverParams,
) -> Result<Solution> {
    let n = problem.dim();
    let common: Vec<ConvexSet> = problem.common.iter().map(|s| s.at(anchor)).collect::<Result<_>>()?;
    let scenarios: Vec<ConvexSet> = problem.scenarios.iter().map(|s| s.at(anchor)).collect::<Result<_>>()?;
    let feas_tol = 10.0 * params.projection.tol.max(PROJ_TOL);
    let mut x0 = params.x0.clone().unwrap_or_else(|| DVector::zeros(n));
    if working.is_empty() {
        // start from the scenarios that bind at the start point
        let margin = feas_tol * (1.0 + x0.norm());
        working.extend((0..scenarios.len()).filter(|&i| {
            scenarios[i].constraints().iter().any(|c| c.value(x0.as_slice()) >= -margin)
        }));
    }
    let mut total = 0;
    loop {
        let set = ConvexSet::intersect_all(n, common.iter().chain(working.iter().map(|&i| &scenarios[i])))?;
        let inner = SolverParams {
            x0: Some(x0),
            ..params.clone()
        };
        let mut sol = solve_on_set(&*problem.operator, &set, &inner)?;
        total += sol.iterations;
        let scale = 1.0 + sol.x_star.norm();
        let mut added = false;
        for (i, s) in scenarios.iter().enumerate() {
            if s.violation(&sol.x_star)? > feas_tol * scale && !working.contains(&i) {
                working.push(i);
                added = true;
            }
        }
        if !added {
            working.sort_unstable();
            let full = ConvexSet::intersect_all(n, common.iter().chain(&scenarios))?;
            sol.feasibility_violation = full.violation(&sol.x_star)?;
            sol.iterations = total;
            return Ok(sol);
        }
        x0 = sol.x_star;
    }
}

/// Minimum over sampled pairs of `(F(x) - F(y)) . (x - y) / |x - y|^2`.
///
/// A diagnostic upper estimate of the strong-monotonicity modulus; a
/// non-positive value means the operator is not strongly monotone.
pub fn estimate_strong_monotonicity<S>(op: &dyn Operator, mut sampler: S, pairs: usize) -> Result<f64>
where
    S: FnMut() -> DVector<f64>,
{
    let mut best = f64::INFINITY;
    for _ in 0..pairs {
        let (x, y) = (sampler(), sampler());
        check_dim(op.dim(), x.len())?;
        check_dim(op.dim(), y.len())?;
        let d = &x - &y;
        let d2 = d.norm_squared();
        if d2 == 0.0 {
            continue;
        }
        best = best.min((op.eval(&x) - op.eval(&y)).dot(&d) / d2);
    }
    if best.is_infinite() {
        return Err(Error::DegeneratePairs);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn halfspace(a: &[f64], b: f64) -> ConvexSet {
        ConvexSet::whole(a.len()).with_halfspace(a, b).unwrap()
    }

    fn shifted_identity(target: DVector<f64>) -> Arc<dyn Operator> {
        let n = target.len();
        Arc::new(AffineOperator::new(DMatrix::identity(n, n), -target).unwrap())
    }

    #[test]
    fn box_example_clamps_the_free_zero() {
        let op = shifted_identity(dvector![3.0, -2.0]);
        let b = ConvexSet::whole(2).with_bounds(vec![0.0; 2], vec![1.0; 2]).unwrap();
        let p = ScenarioVIProblem::new_vi(op, vec![b]).unwrap();
        let s = solve_vi(&p, &SolverParams::default()).unwrap();
        assert!(s.converged);
        assert!((&s.x_star - dvector![1.0, 0.0]).norm() < 1e-9);
        assert!(natural_residual(&p, &dvector![1.0, 0.0], 1.0).unwrap() <= 1e-9);
    }

    #[test]
    fn residual_on_unconstrained_problem_is_operator_norm() {
        let op = shifted_identity(dvector![1.0, 2.0]);
        let p = ScenarioVIProblem::new_vi(op, vec![ConvexSet::whole(2)]).unwrap();
        let x = dvector![0.5, 0.0];
        let r = natural_residual(&p, &x, 1.0).unwrap();
        assert!((r - 4.25f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn all_three_algorithms_agree() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, -1.0, 1.5]);
        let op: Arc<dyn Operator> = Arc::new(AffineOperator::new(a.clone(), dvector![-3.0, -1.0]).unwrap());
        let sets = vec![halfspace(&[1.0, 1.0], 1.0), halfspace(&[-1.0, 0.0], 0.0)];
        let p = ScenarioVIProblem::new_vi(op.clone(), sets).unwrap();
        let pg = solve_vi(&p, &SolverParams { algorithm: Algorithm::ProjectedGradient, ..Default::default() }).unwrap();
        let eg = solve_vi(&p, &SolverParams { algorithm: Algorithm::Extragradient, ..Default::default() }).unwrap();
        assert!(pg.converged && eg.converged);
        assert!((&pg.x_star - &eg.x_star).norm() < 1e-6);
        let sub = solve_vi(
            &p,
            &SolverParams {
                algorithm: Algorithm::ProjectedSubgradient,
                subgradient_c: Some(1.0),
                tol: Some(1e-7),
                ..Default::default()
            },
        )
        .unwrap();
        assert!((&sub.x_star - &eg.x_star).norm() < 1e-3);
    }

    #[test]
    fn optimization_reduction() {
        // F = grad of 1/2 |x - (2,1)|^2 + x1 x2 / 2 over x1 + x2 <= 1, x >= 0
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let op: Arc<dyn Operator> = Arc::new(AffineOperator::new(q, dvector![-2.0, -1.0]).unwrap());
        let set = halfspace(&[1.0, 1.0], 1.0)
            .with_bounds(vec![0.0; 2], vec![f64::INFINITY; 2])
            .unwrap();
        let p = ScenarioVIProblem::new_vi(op, vec![set]).unwrap();
        let s = solve_vi(&p, &SolverParams::default()).unwrap();
        // minimizer on the edge x2 = 1 - x1: d/dx1 of J along the edge vanishes
        // J(x1) = 1/2 (x1-2)^2 + 1/2 (-x1)^2 + x1(1-x1)/2 -> 2x1 - 2 + 0.5 - x1 = 0
        assert!((&s.x_star - dvector![1.0, 0.0]).norm() < 1e-6, "{}", s.x_star);
    }

    #[test]
    fn qvi_with_constant_parametrization_matches_vi() {
        let op = shifted_identity(dvector![2.0, 2.0]);
        let set = halfspace(&[1.0, 0.0], 1.0);
        let vi = ScenarioVIProblem::new_vi(op.clone(), vec![set.clone()]).unwrap();
        let qvi = ScenarioVIProblem::new_qvi(op, vec![ParametrizedSet::constant(set).into()]).unwrap();
        let a = solve_vi(&vi, &SolverParams::default()).unwrap();
        let b = solve_qvi(&qvi, &SolverParams::default()).unwrap();
        assert!(b.converged);
        assert!((&a.x_star - &b.x_star).norm() < 1e-8);
    }

    #[test]
    fn one_dimensional_qvi() {
        // F(x) = x, X(x) = [-1, 1 + x/2]
        let op: Arc<dyn Operator> = Arc::new(AffineOperator::new(DMatrix::identity(1, 1), dvector![0.0]).unwrap());
        let ps = ParametrizedSet::new(1, |x: &DVector<f64>| {
            ConvexSet::whole(1)
                .with_halfspace(&[1.0], 1.0 + 0.5 * x[0])?
                .with_halfspace(&[-1.0], 1.0)
        });
        let p = ScenarioVIProblem::new_qvi(op, vec![ps.into()]).unwrap();
        let s = solve_qvi(&p, &SolverParams::default()).unwrap();
        assert!(s.converged);
        assert!(s.x_star[0].abs() < 1e-8);
    }

    #[test]
    fn monotonicity_estimates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut sampler = || DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        let op = FnOperator::new(2, |x: &DVector<f64>| x * 2.0);
        let a = estimate_strong_monotonicity(&op, &mut sampler, 200).unwrap();
        assert!((a - 2.0).abs() < 1e-9);
        let op = AffineOperator::new(DMatrix::from_row_slice(2, 2, &[1.0, 5.0, -5.0, 1.0]), DVector::zeros(2)).unwrap();
        let a = estimate_strong_monotonicity(&op, &mut sampler, 200).unwrap();
        assert!((a - 1.0).abs() < 1e-6);
        let op = AffineOperator::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]), DVector::zeros(2)).unwrap();
        let a = estimate_strong_monotonicity(&op, &mut sampler, 200).unwrap();
        assert!(a.abs() < 1e-9);
        assert!(matches!(
            estimate_strong_monotonicity(&op, || dvector![1.0, 1.0], 10),
            Err(Error::DegeneratePairs)
        ));
    }

    #[test]
    fn empty_feasible_set_is_reported() {
        let op = shifted_identity(dvector![0.0]);
        let p = ScenarioVIProblem::new_vi(op, vec![halfspace(&[1.0], -1.0), halfspace(&[-1.0], -1.0)]).unwrap();
        assert!(matches!(solve_vi(&p, &SolverParams::default()), Err(Error::InfeasibleSet(_))));
    }

    #[test]
    fn budget_exhaustion_is_flagged() {
        let op: Arc<dyn Operator> = Arc::new(FnOperator::new(2, |x: &DVector<f64>| {
            DVector::from_vec(vec![x[1], -x[0]]) + x * 1e-3
        }));
        let p = ScenarioVIProblem::new_vi(op, vec![halfspace(&[1.0, 1.0], 5.0)]).unwrap();
        let s = solve_vi(&p, &SolverParams { max_iter: 3, x0: Some(dvector![4.0, -3.0]), ..Default::default() }).unwrap();
        assert!(!s.converged);
        assert!(matches!(s.require_converged(), Err(Error::NotConverged { .. })));
    }

    fn random_instance(seed: u64) -> (Arc<dyn Operator>, Vec<ConvexSet>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=3);
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let skew = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        // symmetric part >= 0.5 I, plus a skew-symmetric rotation
        let a = &m * m.transpose() + DMatrix::identity(n, n) * 0.5 + &skew - skew.transpose();
        let b = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
        let op: Arc<dyn Operator> = Arc::new(AffineOperator::new(a, b).unwrap());
        let sets = (0..rng.random_range(1..=6))
            .map(|_| {
                let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                halfspace(&a, rng.random_range(0.0..1.0))
            })
            .collect();
        (op, sets)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn solutions_are_feasible_and_satisfy_the_vi(seed in 0u64..10_000) {
            let (op, sets) = random_instance(seed);
            let p = ScenarioVIProblem::new_vi(op.clone(), sets).unwrap();
            let s = solve_vi(&p, &SolverParams::default()).unwrap();
            prop_assert!(s.converged);
            let set = p.feasible_set(&s.x_star).unwrap();
            prop_assert!(set.violation(&s.x_star).unwrap() <= 10.0 * PROJ_TOL);
            let f = op.eval(&s.x_star);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            for _ in 0..100 {
                let probe = DVector::from_fn(p.dim(), |_, _| rng.random_range(-5.0..5.0));
                let x = set.project(&probe).unwrap();
                prop_assert!(f.dot(&(&x - &s.x_star)) >= -1e-6);
            }
        }

        #[test]
        fn different_starts_reach_the_same_solution(seed in 0u64..10_000) {
            let (op, sets) = random_instance(seed);
            let p = ScenarioVIProblem::new_vi(op, sets).unwrap();
            let a = solve_vi(&p, &SolverParams::default()).unwrap();
            let far = DVector::from_element(p.dim(), 7.0);
            let b = solve_vi(&p, &SolverParams::default().warm_start(far)).unwrap();
            prop_assert!((&a.x_star - &b.x_star).norm() <= 1e-6);
        }
    }
}
