//! Projection planning and the per-block projection routines.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::qp::{self, QpFailure, Row};
use super::{Constraint, ConvexFunction, ProjectionParams, Quadratic};
use crate::error::{Error, Result};

/// Feasibility tolerance handed to the active-set QP.
const QP_FEAS_TOL: f64 = 1e-13;
const SQP_MAX_ITER: usize = 100;
const ROOT_MAX_ITER: usize = 400;

#[derive(Clone)]
enum Curved {
    Quad { idx: Vec<usize>, q: Quadratic },
    Epi {
        xs: Vec<usize>,
        t: usize,
        func: Arc<dyn ConvexFunction>,
    },
}

impl Curved {
    fn value(&self, z: &[f64]) -> f64 {
        match self {
            Curved::Quad { idx, q } => {
                let loc = DVector::from_iterator(idx.len(), idx.iter().map(|&i| z[i]));
                q.eval_local(&loc)
            }
            Curved::Epi { xs, t, func } => {
                let xv: Vec<f64> = xs.iter().map(|&i| z[i]).collect();
                func.value(&xv) - z[*t]
            }
        }
    }

    /// Projection onto this single constraint, in block coordinates.
    fn project(&self, z: &[f64]) -> Option<Vec<f64>> {
        let mut out = z.to_vec();
        match self {
            Curved::Quad { idx, q } => {
                let loc: Vec<f64> = idx.iter().map(|&i| z[i]).collect();
                let proj = project_quadratic(q, &loc)?;
                for (&i, v) in idx.iter().zip(proj) {
                    out[i] = v;
                }
            }
            Curved::Epi { xs, t, func } => {
                let px: Vec<f64> = xs.iter().map(|&i| z[i]).collect();
                let (x, tv) = project_epigraph(func.as_ref(), &px, z[*t])?;
                for (&i, v) in xs.iter().zip(x) {
                    out[i] = v;
                }
                out[*t] = tv;
            }
        }
        Some(out)
    }
}

/// Variables coupled by constraints, with their constraints in local coordinates.
struct Block {
    vars: Vec<usize>,
    rows: Vec<Row>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    curved: Vec<Curved>,
    /// `rows` plus the finite bounds as rows.
    poly: Vec<Row>,
}

impl Block {
    fn has_bounds(&self) -> bool {
        self.lower.iter().any(|v| v.is_finite()) || self.upper.iter().any(|v| v.is_finite())
    }

    fn violation(&self, z: &[f64]) -> f64 {
        let mut v: f64 = 0.0;
        for r in &self.rows {
            v = v.max(dot(&r.a, z) - r.b);
        }
        for (i, zi) in z.iter().enumerate() {
            v = v.max(self.lower[i] - zi).max(zi - self.upper[i]);
        }
        for c in &self.curved {
            v = v.max(c.value(z));
        }
        v.max(0.0)
    }

    fn clamp(&self, z: &mut [f64]) {
        for (i, zi) in z.iter_mut().enumerate() {
            *zi = zi.max(self.lower[i]).min(self.upper[i]);
        }
    }

    fn project_poly(&self, p: &[f64]) -> std::result::Result<Vec<f64>, QpFailure> {
        if self.rows.is_empty() {
            let mut z = p.to_vec();
            self.clamp(&mut z);
            return Ok(z);
        }
        if self.rows.len() == 1 && !self.has_bounds() {
            let r = &self.rows[0];
            let s = dot(&r.a, p) - r.b;
            let nn = dot(&r.a, &r.a);
            if s <= 0.0 || nn == 0.0 {
                return if nn == 0.0 && r.b < 0.0 {
                    Err(QpFailure::Infeasible)
                } else {
                    Ok(p.to_vec())
                };
            }
            return Ok(p.iter().zip(&r.a).map(|(pi, ai)| pi - s / nn * ai).collect());
        }
        qp::project_polyhedron(p, &self.poly, QP_FEAS_TOL).map(|s| s.z)
    }

    fn project(&self, p: &[f64], params: &ProjectionParams) -> Result<Vec<f64>> {
        if self.lower.iter().zip(&self.upper).any(|(l, u)| l > u) {
            return Err(Error::InfeasibleSet("contradictory coordinate bounds".into()));
        }
        if self.curved.is_empty() {
            return self.project_poly(p).map_err(poly_failure);
        }
        if self.curved.len() == 1 && self.poly.is_empty() {
            return self.curved[0]
                .project(p)
                .ok_or_else(|| Error::InfeasibleSet("single convex constraint is empty".into()));
        }
        if self.curved.iter().all(|c| matches!(c, Curved::Quad { .. })) {
            match self.sqp(p, params) {
                SqpOutcome::Solved(z) => return Ok(z),
                SqpOutcome::Infeasible => {
                    return Err(Error::InfeasibleSet(
                        "linearized constraints have no common point".into(),
                    ))
                }
                SqpOutcome::Stalled => {}
            }
        }
        self.dykstra(p, params)
    }

    /// SQP on `min 1/2 |z - p|^2` over rows, bounds and convex quadratics.
    ///
    /// Linearizing a convex constraint gives an outer approximation, so an
    /// infeasible subproblem proves the block empty.
    fn sqp(&self, p: &[f64], params: &ProjectionParams) -> SqpOutcome {
        let n = p.len();
        let quads: Vec<(&Vec<usize>, &Quadratic)> = self
            .curved
            .iter()
            .map(|c| match c {
                Curved::Quad { idx, q } => (idx, q),
                Curved::Epi { .. } => unreachable!("sqp only handles quadratics"),
            })
            .collect();
        let mut z = p.to_vec();
        let mut mu = vec![0.0; quads.len()];
        let scale = 1.0 + p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut last_step = f64::INFINITY;
        for _ in 0..SQP_MAX_ITER {
            let mut h = DMatrix::<f64>::identity(n, n);
            for ((idx, q), &m) in quads.iter().zip(&mu) {
                if m == 0.0 {
                    continue;
                }
                for (a, &ia) in idx.iter().enumerate() {
                    for (b, &ib) in idx.iter().enumerate() {
                        h[(ia, ib)] += m * q.q[(a, b)];
                    }
                }
            }
            let g: Vec<f64> = z.iter().zip(p).map(|(zi, pi)| zi - pi).collect();
            let mut rows: Vec<Row> = self
                .poly
                .iter()
                .map(|r| Row {
                    a: r.a.clone(),
                    b: r.b - dot(&r.a, &z),
                })
                .collect();
            for (idx, q) in &quads {
                let loc = DVector::from_iterator(idx.len(), idx.iter().map(|&i| z[i]));
                let grad = &q.q * &loc + &q.c;
                let mut a = vec![0.0; n];
                for (k, &i) in idx.iter().enumerate() {
                    a[i] = grad[k];
                }
                let val = q.eval_local(&loc);
                if grad.norm() == 0.0 && val > params.tol * scale {
                    // at the minimizer of g and still violated
                    return SqpOutcome::Infeasible;
                }
                rows.push(Row { a, b: -val });
            }
            let sol = match qp::solve_qp(&h, &g, &rows, QP_FEAS_TOL) {
                Ok(s) => s,
                Err(QpFailure::Infeasible) => return SqpOutcome::Infeasible,
                Err(QpFailure::IterationLimit) => return SqpOutcome::Stalled,
            };
            let np = self.poly.len();
            mu.copy_from_slice(&sol.multipliers[np..]);
            for (zi, di) in z.iter_mut().zip(&sol.z) {
                *zi += di;
            }
            let step = sol.z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let znorm = 1.0 + z.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let feasible = self.violation(&z) <= params.tol * znorm;
            // steps stop shrinking at the rounding floor of the QP solve
            if step <= 1e-2 * params.tol * znorm && feasible {
                return SqpOutcome::Solved(z);
            }
            last_step = step;
        }
        if last_step <= params.tol * scale.max(1.0) && self.violation(&z) <= params.tol * scale {
            return SqpOutcome::Solved(z);
        }
        SqpOutcome::Stalled
    }

    /// Dykstra's alternating projections over the polyhedral part and each
    /// curved constraint.
    fn dykstra(&self, p: &[f64], params: &ProjectionParams) -> Result<Vec<f64>> {
        let n = p.len();
        let parts = self.curved.len() + usize::from(!self.poly.is_empty());
        let mut incr = vec![vec![0.0; n]; parts];
        let mut x = p.to_vec();
        let max_diff = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .fold(0.0f64, |m, (u, v)| m.max((u - v).abs()))
        };
        for _ in 0..params.max_sweeps {
            let before = x.clone();
            // the iterate can stall while the correction terms still move
            let mut change: f64 = 0.0;
            let mut k = 0;
            if !self.poly.is_empty() {
                let y: Vec<f64> = x.iter().zip(&incr[0]).map(|(a, b)| a + b).collect();
                x = self.project_poly(&y).map_err(poly_failure)?;
                let next: Vec<f64> = y.iter().zip(&x).map(|(a, b)| a - b).collect();
                change = change.max(max_diff(&next, &incr[0]));
                incr[0] = next;
                k = 1;
            }
            for c in &self.curved {
                let y: Vec<f64> = x.iter().zip(&incr[k]).map(|(a, b)| a + b).collect();
                x = c.project(&y).ok_or_else(|| {
                    Error::InfeasibleSet("a convex constraint in the block is empty".into())
                })?;
                let next: Vec<f64> = y.iter().zip(&x).map(|(a, b)| a - b).collect();
                change = change.max(max_diff(&next, &incr[k]));
                incr[k] = next;
                k += 1;
            }
            let change = change.max(max_diff(&x, &before));
            let scale = 1.0 + x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if change <= params.tol * scale && self.violation(&x) <= params.tol * scale {
                return Ok(x);
            }
        }
        Err(Error::InfeasibleSet(format!(
            "alternating projections did not settle within {} sweeps",
            params.max_sweeps
        )))
    }
}

enum SqpOutcome {
    Solved(Vec<f64>),
    Infeasible,
    Stalled,
}

fn poly_failure(f: QpFailure) -> Error {
    match f {
        QpFailure::Infeasible => Error::InfeasibleSet("polyhedron is empty".into()),
        QpFailure::IterationLimit => {
            Error::InfeasibleSet("active-set projection hit its iteration limit".into())
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cached decomposition of a set into independent blocks.
pub(super) struct Plan {
    dim: usize,
    blocks: Vec<Block>,
    /// Set by a variable-free constraint that can never hold.
    empty: bool,
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, i: usize) -> usize {
        let mut r = i;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut j = i;
        while self.0[j] != r {
            let next = self.0[j];
            self.0[j] = r;
            j = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

fn support(c: &Constraint) -> Vec<usize> {
    match c {
        Constraint::Halfspace(h) => h
            .indices
            .iter()
            .zip(&h.coeffs)
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| *i)
            .collect(),
        Constraint::Bounds { .. } => Vec::new(),
        Constraint::Quadratic(q) => q.indices.clone(),
        Constraint::Epigraph(e) => {
            let mut s = e.x_indices.clone();
            s.push(e.t_index);
            s
        }
    }
}

impl Plan {
    pub(super) fn build(dim: usize, constraints: &[Constraint]) -> Plan {
        let mut uf = UnionFind((0..dim).collect());
        let mut empty = false;
        let mut lower = vec![f64::NEG_INFINITY; dim];
        let mut upper = vec![f64::INFINITY; dim];
        let mut touched = vec![false; dim];
        for c in constraints {
            let s = support(c);
            if let Constraint::Bounds { lower: l, upper: u } = c {
                for i in 0..dim {
                    lower[i] = lower[i].max(l[i]);
                    upper[i] = upper[i].min(u[i]);
                    touched[i] |= l[i].is_finite() || u[i].is_finite();
                }
                continue;
            }
            if s.is_empty() {
                // constant constraint: 0 <= b, or a quadratic with no variables
                let v = c.value(&vec![0.0; dim]);
                empty |= v > 0.0;
                continue;
            }
            for &i in &s {
                touched[i] = true;
            }
            for w in s.windows(2) {
                uf.union(w[0], w[1]);
            }
        }

        // group touched variables by root, ordered by first variable
        let mut root_block: Vec<Option<usize>> = vec![None; dim];
        let mut blocks: Vec<Block> = Vec::new();
        let mut local = vec![usize::MAX; dim];
        for i in 0..dim {
            if !touched[i] {
                continue;
            }
            let r = uf.find(i);
            let b = *root_block[r].get_or_insert_with(|| {
                blocks.push(Block {
                    vars: Vec::new(),
                    rows: Vec::new(),
                    lower: Vec::new(),
                    upper: Vec::new(),
                    curved: Vec::new(),
                    poly: Vec::new(),
                });
                blocks.len() - 1
            });
            local[i] = blocks[b].vars.len();
            blocks[b].vars.push(i);
            blocks[b].lower.push(lower[i]);
            blocks[b].upper.push(upper[i]);
        }

        for c in constraints {
            let s = support(c);
            if s.is_empty() {
                continue;
            }
            let b = root_block[uf.find(s[0])].expect("support variable without block");
            let width = blocks[b].vars.len();
            match c {
                Constraint::Halfspace(h) => {
                    let mut a = vec![0.0; width];
                    for (&i, &v) in h.indices.iter().zip(&h.coeffs) {
                        // zero coefficients may name variables of other blocks
                        if v != 0.0 {
                            a[local[i]] += v;
                        }
                    }
                    blocks[b].rows.push(Row { a, b: h.rhs });
                }
                Constraint::Quadratic(q) => {
                    let idx = q.indices.iter().map(|&i| local[i]).collect();
                    blocks[b].curved.push(Curved::Quad { idx, q: q.clone() });
                }
                Constraint::Epigraph(e) => {
                    blocks[b].curved.push(Curved::Epi {
                        xs: e.x_indices.iter().map(|&i| local[i]).collect(),
                        t: local[e.t_index],
                        func: e.func.clone(),
                    });
                }
                Constraint::Bounds { .. } => unreachable!(),
            }
        }

        for block in &mut blocks {
            let w = block.vars.len();
            block.poly = block.rows.clone();
            for i in 0..w {
                let mut e = vec![0.0; w];
                if block.upper[i].is_finite() {
                    e[i] = 1.0;
                    block.poly.push(Row {
                        a: e.clone(),
                        b: block.upper[i],
                    });
                }
                if block.lower[i].is_finite() {
                    e[i] = -1.0;
                    block.poly.push(Row {
                        a: e,
                        b: -block.lower[i],
                    });
                }
            }
        }

        Plan { dim, blocks, empty }
    }

    pub(super) fn project(&self, x: &[f64], params: &ProjectionParams) -> Result<Vec<f64>> {
        debug_assert_eq!(x.len(), self.dim);
        if self.empty {
            return Err(Error::InfeasibleSet(
                "a constraint without variables is violated".into(),
            ));
        }
        let mut out = x.to_vec();
        for block in &self.blocks {
            let p: Vec<f64> = block.vars.iter().map(|&i| x[i]).collect();
            if block.violation(&p) == 0.0 {
                continue;
            }
            let z = block.project(&p, params)?;
            for (&i, v) in block.vars.iter().zip(z) {
                out[i] = v;
            }
        }
        Ok(out)
    }
}

/// Projection onto `{z : 1/2 z'Qz + c'z <= b}` through the dual multiplier.
///
/// Returns `None` if the set is empty.
pub(crate) fn project_quadratic(q: &Quadratic, p: &[f64]) -> Option<Vec<f64>> {
    let pv = DVector::from_column_slice(p);
    if q.eval_local(&pv) <= 0.0 {
        return Some(p.to_vec());
    }
    let (v, lam) = q.eigen();
    let ph = v.transpose() * &pv;
    let ch = v.transpose() * &q.c;
    let m = p.len();
    let zh = |l: f64| -> DVector<f64> {
        DVector::from_fn(m, |i, _| (ph[i] - l * ch[i]) / (1.0 + l * lam[i]))
    };
    let phi = |z: &DVector<f64>| -> f64 {
        (0..m)
            .map(|i| 0.5 * lam[i] * z[i] * z[i] + ch[i] * z[i])
            .sum::<f64>()
            - q.rhs
    };
    let dphi = |l: f64, z: &DVector<f64>| -> f64 {
        -(0..m)
            .map(|i| {
                let g = lam[i] * z[i] + ch[i];
                g * g / (1.0 + l * lam[i])
            })
            .sum::<f64>()
    };

    let mut lo = 0.0;
    let mut hi = 1.0;
    loop {
        if phi(&zh(hi)) <= 0.0 {
            break;
        }
        lo = hi;
        hi *= 4.0;
        if hi > 1e300 {
            return None;
        }
    }
    let mut l = lo;
    for _ in 0..ROOT_MAX_ITER {
        let z = zh(l);
        let f = phi(&z);
        if f > 0.0 {
            lo = l;
        } else {
            hi = l;
            if f == 0.0 {
                break;
            }
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
        let d = dphi(l, &z);
        let newton = if d < 0.0 { l - f / d } else { f64::NAN };
        l = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    Some((v * zh(hi)).as_slice().to_vec())
}

/// Projection of `(px, pt)` onto `{(x, t) : h(x) <= t}`.
fn project_epigraph(h: &dyn ConvexFunction, px: &[f64], pt: f64) -> Option<(Vec<f64>, f64)> {
    if h.value(px) <= pt {
        return Some((px.to_vec(), pt));
    }
    let phi = |l: f64| {
        let x = h.prox(px, l);
        (h.value(&x) - pt - l, x)
    };
    let mut lo = 0.0;
    let mut hi = 1.0;
    while phi(hi).0 > 0.0 {
        lo = hi;
        hi *= 4.0;
        if hi > 1e300 {
            return None;
        }
    }
    for _ in 0..ROOT_MAX_ITER {
        if hi - lo <= 1e-15 * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if phi(mid).0 > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (_, x) = phi(hi);
    let t = (pt + hi).max(h.value(&x));
    Some((x, t))
}
