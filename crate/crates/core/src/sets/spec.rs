//! JSON description of polyhedral and quadratic sets.
//!
//! ```json
//! {"halfspaces": [{"a": [1, 0], "b": 1}],
//!  "box": {"l": [0, null], "u": [1, 2]},
//!  "quadratics": [{"Q": [[2, 0], [0, 2]], "c": [0, 0], "b": 1}]}
//! ```
//!
//! `null` box entries are absent bounds. A halfspace may carry `b_anchor`,
//! making its offset `b + b_anchor . x` for an anchor point `x`; such specs
//! describe parametrized sets.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{ConvexSet, ParametrizedSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HalfspaceSpec {
    pub a: Vec<f64>,
    pub b: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_anchor: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSpec {
    pub l: Vec<Option<f64>>,
    pub u: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticSpec {
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    pub c: Vec<f64>,
    pub b: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetSpec {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub halfspaces: Vec<HalfspaceSpec>,
    #[serde(default, rename = "box", skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoundsSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub quadratics: Vec<QuadraticSpec>,
}

fn len_check(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::InvalidSet(format!(
            "{what} has length {got}, expected {expected}"
        )));
    }
    Ok(())
}

impl SetSpec {
    /// True if any halfspace offset depends on an anchor.
    pub fn is_parametrized(&self) -> bool {
        self.halfspaces.iter().any(|h| h.b_anchor.is_some())
    }

    /// Builds the set at `anchor` (ignored unless the spec is parametrized).
    pub fn build_at(&self, dim: usize, anchor: Option<&DVector<f64>>) -> Result<ConvexSet> {
        let mut set = ConvexSet::whole(dim);
        for h in &self.halfspaces {
            len_check("halfspace normal", dim, h.a.len())?;
            let mut b = h.b;
            if let Some(ba) = &h.b_anchor {
                len_check("b_anchor", dim, ba.len())?;
                if let Some(x) = anchor {
                    b += ba.iter().zip(x.iter()).map(|(u, v)| u * v).sum::<f64>();
                }
            }
            set = set.with_halfspace(&h.a, b)?;
        }
        if let Some(bx) = &self.bounds {
            len_check("box lower bound", dim, bx.l.len())?;
            len_check("box upper bound", dim, bx.u.len())?;
            let l = bx.l.iter().map(|v| v.unwrap_or(f64::NEG_INFINITY)).collect();
            let u = bx.u.iter().map(|v| v.unwrap_or(f64::INFINITY)).collect();
            set = set.with_bounds(l, u)?;
        }
        for q in &self.quadratics {
            len_check("quadratic Q", dim, q.q.len())?;
            for row in &q.q {
                len_check("quadratic Q row", dim, row.len())?;
            }
            len_check("quadratic c", dim, q.c.len())?;
            let qm = DMatrix::from_fn(dim, dim, |i, j| q.q[i][j]);
            set = set.with_quadratic(qm, DVector::from_column_slice(&q.c), q.b)?;
        }
        Ok(set)
    }

    pub fn to_set(&self, dim: usize) -> Result<ConvexSet> {
        self.build_at(dim, None)
    }

    pub fn to_parametrized(&self, dim: usize) -> Result<ParametrizedSet> {
        // validate once up front so that anchor evaluation cannot fail on shape
        self.build_at(dim, Some(&DVector::zeros(dim)))?;
        let spec = self.clone();
        Ok(ParametrizedSet::new(dim, move |x: &DVector<f64>| {
            spec.build_at(dim, Some(x))
        }))
    }
}
