//! Dual active-set solver for small dense strictly convex QPs.
//!
//! The core routine projects a point onto a polyhedron `{z : a_i . z <= b_i}`
//! by adding the most violated constraint and walking its multiplier up from
//! zero, dropping active constraints whose multipliers would turn negative.
//! Starting from the unconstrained minimizer keeps the iterate dual feasible
//! throughout, so an empty polyhedron is detected as an unbounded dual ray.
//! General positive definite Hessians are handled by a Cholesky change of
//! variables.

use nalgebra::{DMatrix, DVector};

/// One affine row `a . z <= b` in local (dense) coordinates.
#[derive(Debug, Clone)]
pub(crate) struct Row {
    pub a: Vec<f64>,
    pub b: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct QpSolution {
    pub z: Vec<f64>,
    /// Multiplier for every input row; zero for inactive rows.
    pub multipliers: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum QpFailure {
    Infeasible,
    IterationLimit,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Feasibility tolerance for a row, scaled by the row norm and the magnitude
/// of the quantities involved.
fn row_tol(norm: f64, b: f64, z_norm: f64, feas_tol: f64) -> f64 {
    feas_tol * (norm * (1.0 + z_norm) + b.abs())
}

/// Euclidean projection of `p` onto `{z : a_i . z <= b_i}`.
pub(crate) fn project_polyhedron(
    p: &[f64],
    rows: &[Row],
    feas_tol: f64,
) -> Result<QpSolution, QpFailure> {
    let n = p.len();
    let norms: Vec<f64> = rows.iter().map(|r| dot(&r.a, &r.a).sqrt()).collect();
    if rows
        .iter()
        .zip(&norms)
        .any(|(r, &nr)| nr == 0.0 && r.b < -feas_tol * (1.0 + r.b.abs()))
    {
        return Err(QpFailure::Infeasible);
    }
    let mut z = p.to_vec();
    let mut active: Vec<usize> = Vec::new();
    let mut u_active: Vec<f64> = Vec::new();
    let max_iter = 50 * (rows.len() + n) + 100;
    let mut iter = 0;

    loop {
        let z_norm = dot(&z, &z).sqrt();
        // most violated row, by normalized violation
        let mut add = None;
        let mut worst = 0.0;
        for (i, row) in rows.iter().enumerate() {
            if norms[i] == 0.0 || active.contains(&i) {
                continue;
            }
            let s = dot(&row.a, &z) - row.b;
            if s > row_tol(norms[i], row.b, z_norm, feas_tol) {
                let v = s / norms[i];
                if v > worst {
                    worst = v;
                    add = Some(i);
                }
            }
        }
        let Some(q) = add else {
            break;
        };
        let aq = &rows[q].a;
        let mut u_q = 0.0;

        loop {
            iter += 1;
            if iter > max_iter {
                return Err(QpFailure::IterationLimit);
            }
            // r = argmin ||N r - a_q||, dir = a_q - N r (component orthogonal to active normals)
            let (r, dir) = if active.is_empty() {
                (Vec::new(), aq.clone())
            } else {
                let nmat = DMatrix::from_fn(n, active.len(), |i, j| rows[active[j]].a[i]);
                let qr = nmat.qr();
                let qm = qr.q();
                let rm = qr.r();
                let aqv = DVector::from_column_slice(aq);
                let qta = qm.transpose() * &aqv;
                let r = rm
                    .solve_upper_triangular(&qta)
                    .map(|v| v.as_slice().to_vec())
                    .unwrap_or_else(|| vec![0.0; active.len()]);
                let proj = &qm * &qta;
                let dir: Vec<f64> = aq.iter().zip(proj.iter()).map(|(a, b)| a - b).collect();
                (r, dir)
            };
            let dir_sq = dot(&dir, &dir);
            let dependent = dir_sq.sqrt() <= 1e-11 * norms[q];

            // partial step: first active multiplier to hit zero
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (j, &rj) in r.iter().enumerate() {
                if rj > 1e-14 {
                    let t = u_active[j] / rj;
                    if t < t1 {
                        t1 = t;
                        drop = Some(j);
                    }
                }
            }
            let slack = dot(aq, &z) - rows[q].b;
            let t2 = if dependent {
                f64::INFINITY
            } else {
                (slack / dir_sq).max(0.0)
            };
            if t1.is_infinite() && t2.is_infinite() {
                return Err(QpFailure::Infeasible);
            }
            let t = t1.min(t2);
            for (zi, di) in z.iter_mut().zip(&dir) {
                *zi -= t * di;
            }
            for (uj, rj) in u_active.iter_mut().zip(&r) {
                *uj -= t * rj;
            }
            u_q += t;

            if t2 <= t1 {
                active.push(q);
                u_active.push(u_q);
                break;
            }
            let j = drop.expect("partial step without a dropping index");
            active.remove(j);
            u_active.remove(j);
        }
    }

    let mut multipliers = vec![0.0; rows.len()];
    for (&i, &u) in active.iter().zip(&u_active) {
        multipliers[i] = u.max(0.0);
    }
    Ok(QpSolution { z, multipliers })
}

/// Solves `min 1/2 d' H d + g' d  s.t.  a_i . d <= b_i` for positive definite `H`.
pub(crate) fn solve_qp(
    h: &DMatrix<f64>,
    g: &[f64],
    rows: &[Row],
    feas_tol: f64,
) -> Result<QpSolution, QpFailure> {
    let n = g.len();
    let chol = h
        .clone()
        .cholesky()
        .ok_or(QpFailure::Infeasible)?;
    let l = chol.l();
    // w = L' d;  objective 1/2|w|^2 + (L^-1 g) . w;  rows (L^-1 a_i) . w <= b_i
    let gv = DVector::from_column_slice(g);
    let lg = l
        .solve_lower_triangular(&gv)
        .ok_or(QpFailure::Infeasible)?;
    let target: Vec<f64> = lg.iter().map(|v| -v).collect();
    let mut trows = Vec::with_capacity(rows.len());
    for row in rows {
        let av = DVector::from_column_slice(&row.a);
        let la = l
            .solve_lower_triangular(&av)
            .ok_or(QpFailure::Infeasible)?;
        trows.push(Row {
            a: la.as_slice().to_vec(),
            b: row.b,
        });
    }
    let sol = project_polyhedron(&target, &trows, feas_tol)?;
    let w = DVector::from_column_slice(&sol.z);
    let d = l
        .transpose()
        .solve_upper_triangular(&w)
        .ok_or(QpFailure::Infeasible)?;
    debug_assert_eq!(d.len(), n);
    Ok(QpSolution {
        z: d.as_slice().to_vec(),
        multipliers: sol.multipliers,
    })
}
