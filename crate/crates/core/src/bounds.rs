//! Risk bounds from the number of support constraints.
//!
//! For a confidence parameter `beta`, `N` samples and `k` support constraints,
//! `t(k)` is the unique root in `(0,1)` of
//!
//! ```text
//!   beta/(N+1) * sum_{l=k..N} C(l,k) t^(l-k)  -  C(N,k) t^(N-k)  =  0
//! ```
//!
//! and `t(k) = 0` for `k >= N`. The risk bound is `epsilon(k) = 1 - t(k)`.
//!
//! The polynomial is evaluated divided by `C(N,k)`, which keeps every
//! coefficient in `[0, 1]`; the binomial ratios are formed in log space and
//! the sum is accumulated with an exponent shift, so `N` in the thousands
//! neither overflows nor underflows.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Bracket endpoints; the root is interior.
const BRACKET_EDGE: f64 = 1e-15;
/// Minimum bisection width. Bisection continues past it until the bracket
/// endpoints are adjacent floats, which keeps the residual far below 1e-10.
pub const ROOT_WIDTH: f64 = 1e-12;
/// Residual tolerance reported alongside every interior root.
pub const ROOT_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundQuery {
    /// Number of support constraints (or the decision dimension for a-priori use).
    pub k: usize,
    /// Number of samples `N`.
    #[serde(rename = "N")]
    pub n_samples: usize,
    pub beta: f64,
}

impl BoundQuery {
    pub fn new(k: usize, n_samples: usize, beta: f64) -> Result<Self> {
        let q = BoundQuery { k, n_samples, beta };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::InvalidQuery(format!(
                "beta must lie in (0,1), got {}",
                self.beta
            )));
        }
        if self.n_samples < 1 {
            return Err(Error::InvalidQuery("N must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CertificateKind {
    #[serde(rename = "a-priori")]
    APriori,
    #[serde(rename = "a-posteriori")]
    APosteriori,
}

/// A risk certificate: with confidence at least `1 - beta` over the draw of
/// the `N` samples, the risk of the computed solution is at most `epsilon`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub query: BoundQuery,
    pub t_value: f64,
    pub epsilon: f64,
    pub kind: CertificateKind,
    /// Absolute residual of the normalized polynomial at `t_value`.
    pub residual: f64,
}

fn ln_binomial(n: usize, k: usize) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// Precomputed log-coefficients of the normalized polynomial for one query.
struct BoundPolynomial {
    /// `ln(beta/(N+1)) + ln C(l,k) - ln C(N,k)` for `l = k..=N`.
    log_coeffs: Vec<f64>,
    /// `N - k`, the degree of the subtracted monomial.
    degree: usize,
}

impl BoundPolynomial {
    fn new(q: &BoundQuery) -> Self {
        let (n, k) = (q.n_samples, q.k);
        let base = q.beta.ln() - ((n + 1) as f64).ln() - ln_binomial(n, k);
        let log_coeffs = (k..=n).map(|l| base + ln_binomial(l, k)).collect();
        BoundPolynomial {
            log_coeffs,
            degree: n - k,
        }
    }

    /// Log of the positive part `beta/(N+1) * sum r_l t^(l-k)`.
    fn log_positive(&self, t: f64) -> f64 {
        let lt = t.ln();
        let mut shift = f64::NEG_INFINITY;
        for (p, c) in self.log_coeffs.iter().enumerate() {
            shift = shift.max(c + p as f64 * lt);
        }
        let sum: f64 = self
            .log_coeffs
            .iter()
            .enumerate()
            .map(|(p, c)| (c + p as f64 * lt - shift).exp())
            .sum();
        shift + sum.ln()
    }

    fn log_negative(&self, t: f64) -> f64 {
        self.degree as f64 * t.ln()
    }

    /// Positive iff the polynomial is positive at `t`.
    fn log_gap(&self, t: f64) -> f64 {
        self.log_positive(t) - self.log_negative(t)
    }

    fn value(&self, t: f64) -> f64 {
        self.log_positive(t).exp() - self.log_negative(t).exp()
    }
}

/// Value of the bound polynomial divided by `C(N,k)`, for `0 <= k < N` and
/// `t` in `(0,1]`.
pub fn normalized_polynomial(query: &BoundQuery, t: f64) -> Result<f64> {
    query.validate()?;
    if query.k >= query.n_samples {
        return Err(Error::InvalidQuery(
            "polynomial is only defined for k < N".into(),
        ));
    }
    Ok(BoundPolynomial::new(query).value(t))
}

fn solve_with_residual(query: &BoundQuery) -> Result<(f64, f64)> {
    query.validate()?;
    if query.k >= query.n_samples {
        return Ok((0.0, 0.0));
    }
    let poly = BoundPolynomial::new(query);

    let mut lo = BRACKET_EDGE;
    // The polynomial equals beta/(N+1) > 0 at t = 0; extremely small beta can
    // push the root below the default edge.
    while poly.log_gap(lo) <= 0.0 {
        lo *= 1e-10;
        if lo < f64::MIN_POSITIVE {
            return Err(Error::NoBracket {
                k: query.k,
                n: query.n_samples,
            });
        }
    }
    let mut hi = 1.0 - BRACKET_EDGE;
    if poly.log_gap(hi) >= 0.0 {
        return Err(Error::NoBracket {
            k: query.k,
            n: query.n_samples,
        });
    }

    for _ in 0..4096 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if poly.log_gap(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    debug_assert!(hi - lo <= ROOT_WIDTH);

    let (r_lo, r_hi) = (poly.value(lo).abs(), poly.value(hi).abs());
    Ok(if r_lo <= r_hi { (lo, r_lo) } else { (hi, r_hi) })
}

/// `t(k)` for the given query.
pub fn solve_t(query: &BoundQuery) -> Result<f64> {
    solve_with_residual(query).map(|(t, _)| t)
}

/// `epsilon(k) = 1 - t(k)`.
pub fn epsilon(query: &BoundQuery) -> Result<f64> {
    Ok(1.0 - solve_t(query)?)
}

/// `epsilon(k)` for every `k = 0..=N`.
pub fn epsilon_table(n_samples: usize, beta: f64) -> Result<Vec<(usize, f64)>> {
    BoundQuery::new(0, n_samples, beta)?;
    (0..=n_samples)
        .map(|k| Ok((k, epsilon(&BoundQuery::new(k, n_samples, beta)?)?)))
        .collect()
}

/// Builds a certificate. For `CertificateKind::APriori` pass the decision
/// dimension as `k`; for `APosteriori` pass the observed support count.
pub fn certify(k: usize, n_samples: usize, beta: f64, kind: CertificateKind) -> Result<Certificate> {
    let query = BoundQuery::new(k, n_samples, beta)?;
    let (t_value, residual) = solve_with_residual(&query)?;
    Ok(Certificate {
        query,
        t_value,
        epsilon: 1.0 - t_value,
        kind,
        residual,
    })
}
