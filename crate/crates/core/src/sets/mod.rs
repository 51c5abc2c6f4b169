//! Scenario constraint sets.
//!
//! A [`ConvexSet`] is a finite intersection of scalar convex constraints
//! `g(x) <= 0`. Sets support membership tests, maximum-residual violation and
//! Euclidean projection onto the whole intersection.
//!
//! Projection splits the variables into independent blocks (constraints that
//! share no variable never interact), then handles each block with the
//! cheapest exact method available:
//!
//! * one constraint: closed form (halfspace, bounds) or a 1-D dual root find
//!   (convex quadratic, epigraph);
//! * only affine rows: dual active-set QP;
//! * affine rows plus convex quadratics: SQP whose subproblems are solved by
//!   the same active-set QP, falling back to Dykstra if it stalls;
//! * anything else: Dykstra's alternating projections.

mod project;
pub(crate) mod qp;
mod spec;

use std::fmt;
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

pub use spec::{BoundsSpec, HalfspaceSpec, QuadraticSpec, SetSpec};

/// Default projection tolerance.
pub const PROJ_TOL: f64 = 1e-9;
/// Default Dykstra sweep budget before an intersection is declared empty.
pub const MAX_SWEEPS: usize = 10_000;
/// Eigenvalue floor used to accept a quadratic form as positive semidefinite.
pub const PSD_FLOOR: f64 = -1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionParams {
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for ProjectionParams {
    fn default() -> Self {
        ProjectionParams {
            tol: PROJ_TOL,
            max_sweeps: MAX_SWEEPS,
        }
    }
}

/// A convex function `h` used in epigraph constraints `h(x) - t <= 0`.
pub trait ConvexFunction: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;

    /// `argmin_x 1/2 |x - p|^2 + lambda h(x)`.
    ///
    /// The default runs gradient descent on the strongly convex prox
    /// objective. Steps are accepted by a local Lipschitz test on gradients,
    /// which stays meaningful below the rounding floor of function values.
    /// Override it when a closed form exists.
    fn prox(&self, p: &[f64], lambda: f64) -> Vec<f64> {
        let grad = |x: &[f64]| -> Vec<f64> {
            self.gradient(x)
                .iter()
                .zip(x.iter().zip(p))
                .map(|(gh, (xi, pi))| xi - pi + lambda * gh)
                .collect()
        };
        let norm = |g: &[f64]| g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut x = p.to_vec();
        let mut g = grad(&x);
        let mut step = 1.0;
        for _ in 0..100_000 {
            let gn = norm(&g);
            if gn <= 1e-15 * (1.0 + norm(&x)) {
                break;
            }
            loop {
                let cand: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - step * gi).collect();
                let gc = grad(&cand);
                let diff: Vec<f64> = gc.iter().zip(&g).map(|(a, b)| a - b).collect();
                // step * L_local <= 1
                if norm(&diff) <= gn || step < 1e-18 {
                    x = cand;
                    g = gc;
                    break;
                }
                step *= 0.5;
            }
            step = (step * 1.5).min(1.0);
        }
        x
    }
}

/// Sparse affine row `a . x <= b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Halfspace {
    pub indices: Vec<usize>,
    pub coeffs: Vec<f64>,
    pub rhs: f64,
}

impl Halfspace {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.indices
            .iter()
            .zip(&self.coeffs)
            .map(|(&i, c)| c * x[i])
            .sum::<f64>()
            - self.rhs
    }
}

/// Convex quadratic `1/2 z'Qz + c'z <= b` over the variables `indices`.
#[derive(Clone)]
pub struct Quadratic {
    pub indices: Vec<usize>,
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub rhs: f64,
    eig: Arc<(DMatrix<f64>, DVector<f64>)>,
}

impl fmt::Debug for Quadratic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Quadratic")
            .field("indices", &self.indices)
            .field("q", &self.q)
            .field("c", &self.c)
            .field("rhs", &self.rhs)
            .finish()
    }
}

impl Quadratic {
    pub fn new(indices: Vec<usize>, q: DMatrix<f64>, c: DVector<f64>, rhs: f64) -> Result<Self> {
        let m = indices.len();
        if q.nrows() != m || q.ncols() != m || c.len() != m {
            return Err(Error::InvalidSet(format!(
                "quadratic over {m} variables has Q {}x{} and c of length {}",
                q.nrows(),
                q.ncols(),
                c.len()
            )));
        }
        let sym = (&q + q.transpose()) * 0.5;
        if (&sym - &q).amax() > 1e-9 * (1.0 + q.amax()) {
            return Err(Error::InvalidSet("quadratic form is not symmetric".into()));
        }
        let eig = sym.clone().symmetric_eigen();
        let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if m > 0 && min_eig < PSD_FLOOR {
            return Err(Error::InvalidSet(format!(
                "quadratic form is not positive semidefinite (min eigenvalue {min_eig:.3e})"
            )));
        }
        let vals = eig.eigenvalues.map(|v| v.max(0.0));
        Ok(Quadratic {
            indices,
            q: sym,
            c,
            rhs,
            eig: Arc::new((eig.eigenvectors, vals)),
        })
    }

    fn local(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.indices.len(), self.indices.iter().map(|&i| x[i]))
    }

    pub(crate) fn eval_local(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.q * z)) + self.c.dot(z) - self.rhs
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.eval_local(&self.local(x))
    }

    pub(crate) fn eigen(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.eig.0, &self.eig.1)
    }
}

/// `h(x_S) - x_t <= 0` for a convex oracle `h` over the variables `x_indices`.
#[derive(Clone)]
pub struct Epigraph {
    pub x_indices: Vec<usize>,
    pub t_index: usize,
    pub func: Arc<dyn ConvexFunction>,
}

impl fmt::Debug for Epigraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Epigraph")
            .field("x_indices", &self.x_indices)
            .field("t_index", &self.t_index)
            .finish_non_exhaustive()
    }
}

impl Epigraph {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let xs: Vec<f64> = self.x_indices.iter().map(|&i| x[i]).collect();
        self.func.value(&xs) - x[self.t_index]
    }
}

/// One scalar convex constraint family member.
#[derive(Debug, Clone)]
pub enum Constraint {
    Halfspace(Halfspace),
    /// Coordinate bounds over the full dimension; infinite entries are absent bounds.
    Bounds { lower: Vec<f64>, upper: Vec<f64> },
    Quadratic(Quadratic),
    Epigraph(Epigraph),
}

impl Constraint {
    /// Largest constraint value `g(x)` (bounds contribute one value per side).
    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Constraint::Halfspace(h) => h.eval(x),
            Constraint::Bounds { lower, upper } => x
                .iter()
                .zip(lower.iter().zip(upper))
                .map(|(xi, (l, u))| (l - xi).max(xi - u))
                .fold(f64::NEG_INFINITY, f64::max),
            Constraint::Quadratic(q) => q.eval(x),
            Constraint::Epigraph(e) => e.eval(x),
        }
    }

    fn is_affine(&self) -> bool {
        matches!(self, Constraint::Halfspace(_) | Constraint::Bounds { .. })
    }

    fn shifted(&self, offset: usize, total: usize) -> Constraint {
        let shift = |v: &[usize]| v.iter().map(|i| i + offset).collect::<Vec<_>>();
        match self {
            Constraint::Halfspace(h) => Constraint::Halfspace(Halfspace {
                indices: shift(&h.indices),
                coeffs: h.coeffs.clone(),
                rhs: h.rhs,
            }),
            Constraint::Bounds { lower, upper } => {
                let mut l = vec![f64::NEG_INFINITY; total];
                let mut u = vec![f64::INFINITY; total];
                l[offset..offset + lower.len()].copy_from_slice(lower);
                u[offset..offset + upper.len()].copy_from_slice(upper);
                Constraint::Bounds { lower: l, upper: u }
            }
            Constraint::Quadratic(q) => Constraint::Quadratic(Quadratic {
                indices: shift(&q.indices),
                ..q.clone()
            }),
            Constraint::Epigraph(e) => Constraint::Epigraph(Epigraph {
                x_indices: shift(&e.x_indices),
                t_index: e.t_index + offset,
                func: e.func.clone(),
            }),
        }
    }
}

/// Intersection of convex constraints in `R^dim`. Immutable once built.
#[derive(Clone)]
pub struct ConvexSet {
    dim: usize,
    constraints: Vec<Constraint>,
    plan: Arc<OnceLock<project::Plan>>,
}

impl fmt::Debug for ConvexSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ConvexSet")
            .field("dim", &self.dim)
            .field("constraints", &self.constraints)
            .finish()
    }
}

impl ConvexSet {
    /// The whole space `R^dim`.
    pub fn whole(dim: usize) -> Self {
        ConvexSet {
            dim,
            constraints: Vec::new(),
            plan: Arc::new(OnceLock::new()),
        }
    }

    pub fn from_constraints(dim: usize, constraints: Vec<Constraint>) -> Result<Self> {
        let mut set = ConvexSet::whole(dim);
        for c in constraints {
            set.push(c)?;
        }
        Ok(set)
    }

    fn push(&mut self, c: Constraint) -> Result<()> {
        let n = self.dim;
        match &c {
            Constraint::Halfspace(h) => {
                if h.indices.len() != h.coeffs.len() || h.indices.iter().any(|&i| i >= n) {
                    return Err(Error::InvalidSet("halfspace index out of range".into()));
                }
            }
            Constraint::Bounds { lower, upper } => {
                check_dim(n, lower.len())?;
                check_dim(n, upper.len())?;
                if let Some(i) = (0..n).find(|&i| !(lower[i] <= upper[i])) {
                    return Err(Error::InvalidSet(format!(
                        "bounds at coordinate {i} have lower {} > upper {}",
                        lower[i], upper[i]
                    )));
                }
            }
            Constraint::Quadratic(q) => {
                if q.indices.iter().any(|&i| i >= n) {
                    return Err(Error::InvalidSet("quadratic index out of range".into()));
                }
            }
            Constraint::Epigraph(e) => {
                if e.x_indices.iter().any(|&i| i >= n)
                    || e.t_index >= n
                    || e.func.dim() != e.x_indices.len()
                    || e.x_indices.contains(&e.t_index)
                {
                    return Err(Error::InvalidSet("malformed epigraph constraint".into()));
                }
            }
        }
        self.constraints.push(c);
        self.plan = Arc::new(OnceLock::new());
        Ok(())
    }

    /// Adds `a . x <= b` (`a` dense).
    pub fn with_halfspace(mut self, a: &[f64], b: f64) -> Result<Self> {
        check_dim(self.dim, a.len())?;
        let (indices, coeffs) = a
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i, *v))
            .unzip();
        self.push(Constraint::Halfspace(Halfspace {
            indices,
            coeffs,
            rhs: b,
        }))?;
        Ok(self)
    }

    pub fn with_bounds(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        self.push(Constraint::Bounds { lower, upper })?;
        Ok(self)
    }

    /// Adds `1/2 x'Qx + c'x <= b` with dense `Q`, `c`.
    pub fn with_quadratic(mut self, q: DMatrix<f64>, c: DVector<f64>, b: f64) -> Result<Self> {
        check_dim(self.dim, c.len())?;
        if q.nrows() != self.dim || q.ncols() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: q.nrows(),
            });
        }
        let used: Vec<usize> = (0..self.dim)
            .filter(|&i| c[i] != 0.0 || q.row(i).iter().any(|v| *v != 0.0))
            .collect();
        let qs = DMatrix::from_fn(used.len(), used.len(), |a, b| q[(used[a], used[b])]);
        let cs = DVector::from_iterator(used.len(), used.iter().map(|&i| c[i]));
        let quad = Quadratic::new(used, qs, cs, b)?;
        self.push(Constraint::Quadratic(quad))?;
        Ok(self)
    }

    pub fn with_constraint(mut self, c: Constraint) -> Result<Self> {
        self.push(c)?;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn is_affine(&self) -> bool {
        self.constraints.iter().all(Constraint::is_affine)
    }

    /// Intersection with another set of the same dimension.
    pub fn intersect(&self, other: &ConvexSet) -> Result<ConvexSet> {
        check_dim(self.dim, other.dim)?;
        let mut out = self.clone();
        out.constraints.extend(other.constraints.iter().cloned());
        out.plan = Arc::new(OnceLock::new());
        Ok(out)
    }

    /// Intersection of many sets of dimension `dim`.
    pub fn intersect_all<'a, I>(dim: usize, sets: I) -> Result<ConvexSet>
    where
        I: IntoIterator<Item = &'a ConvexSet>,
    {
        let mut out = ConvexSet::whole(dim);
        for s in sets {
            check_dim(dim, s.dim)?;
            out.constraints.extend(s.constraints.iter().cloned());
        }
        Ok(out)
    }

    /// Places this set on coordinates `offset..offset+dim` of `R^total`.
    pub fn embed(&self, offset: usize, total: usize) -> Result<ConvexSet> {
        if offset + self.dim > total {
            return Err(Error::DimensionMismatch {
                expected: total,
                got: offset + self.dim,
            });
        }
        Ok(ConvexSet {
            dim: total,
            constraints: self
                .constraints
                .iter()
                .map(|c| c.shifted(offset, total))
                .collect(),
            plan: Arc::new(OnceLock::new()),
        })
    }

    /// Cartesian product `S_1 x ... x S_k`.
    pub fn product(parts: &[ConvexSet]) -> Result<ConvexSet> {
        let total: usize = parts.iter().map(|p| p.dim).sum();
        let mut out = ConvexSet::whole(total);
        let mut offset = 0;
        for p in parts {
            out.constraints.extend(p.embed(offset, total)?.constraints);
            offset += p.dim;
        }
        Ok(out)
    }

    fn check_point(&self, x: &DVector<f64>) -> Result<()> {
        check_dim(self.dim, x.len())
    }

    /// Maximum of `max(g(x), 0)` over all constraints.
    pub fn violation(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_point(x)?;
        Ok(self.violation_unchecked(x.as_slice()))
    }

    pub(crate) fn violation_unchecked(&self, x: &[f64]) -> f64 {
        self.constraints
            .iter()
            .map(|c| c.value(x).max(0.0))
            .fold(0.0, f64::max)
    }

    /// True iff every constraint satisfies `g(x) <= tol`.
    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> Result<bool> {
        self.check_point(x)?;
        Ok(self.constraints.iter().all(|c| c.value(x.as_slice()) <= tol))
    }

    /// Euclidean projection onto the set with default parameters.
    pub fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.project_with(x, &ProjectionParams::default())
    }

    pub fn project_with(&self, x: &DVector<f64>, params: &ProjectionParams) -> Result<DVector<f64>> {
        self.check_point(x)?;
        let plan = self
            .plan
            .get_or_init(|| project::Plan::build(self.dim, &self.constraints));
        plan.project(x.as_slice(), params).map(DVector::from_vec)
    }
}

/// An anchor-dependent set `X(x)`, as used by quasi-variational inequalities.
#[derive(Clone)]
pub struct ParametrizedSet {
    dim: usize,
    builder: Arc<dyn Fn(&DVector<f64>) -> Result<ConvexSet> + Send + Sync>,
}

impl fmt::Debug for ParametrizedSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParametrizedSet")
            .field("dim", &self.dim)
            .finish_non_exhaustive()
    }
}

impl ParametrizedSet {
    pub fn new<F>(dim: usize, builder: F) -> Self
    where
        F: Fn(&DVector<f64>) -> Result<ConvexSet> + Send + Sync + 'static,
    {
        ParametrizedSet {
            dim,
            builder: Arc::new(builder),
        }
    }

    /// A parametrization that ignores its anchor.
    pub fn constant(set: ConvexSet) -> Self {
        ParametrizedSet::new(set.dim(), move |_| Ok(set.clone()))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn at(&self, anchor: &DVector<f64>) -> Result<ConvexSet> {
        check_dim(self.dim, anchor.len())?;
        let set = (self.builder)(anchor)?;
        check_dim(self.dim, set.dim())?;
        Ok(set)
    }
}
