//! JSON problem files for the `solve-vi` and `support` workflows.
//!
//! A file names exactly one operator, either an affine map or a built-in game:
//!
//! ```json
//! {"affine": {"A": [[2, 0], [0, 2]], "b": [-2, -2]},
//!  "scenarios": [{"halfspaces": [{"a": [1, 0], "b": 1}]}],
//!  "common": {"box": {"l": [0, 0], "u": [null, null]}}}
//! ```
//!
//! ```json
//! {"game": {"M": 2, "dims": [1, 1], "cost_model": "affine_quadratic",
//!           "A": [[2, 0.5], [0.5, 2]], "c": [-1, -1]},
//!  "scenarios": [{"halfspaces": [{"a": [1, 1], "b": 1}]}]}
//! ```
//!
//! A game without `samples` has uncertain constraints given by `scenarios`
//! and is solved as its Nash VI. A game with `samples` has uncertain costs
//! and is solved for its sampled robust equilibrium, as the lifted VI or (in
//! QVI mode) as the epigraph QVI; the samples are then the scenarios.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::demand::{agent_set, DrCost, Hourly};
use crate::error::{check_dim, Error, Result};
use crate::games::{
    build_epigraph_qvi, build_lifted_vi, pseudo_gradient, AffineQuadraticCost, EpigraphQvi, GameSpec,
    LiftedVi, LocalSets, UncertaintyMode,
};
use crate::sets::{ConvexSet, SetSpec};
use crate::vi::{AffineOperator, Operator, ScenarioSet, ScenarioVIProblem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineSpec {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cost_model", rename_all = "snake_case")]
pub enum CostModelSpec {
    /// `J^j = 1/2 x^j' A_jj x^j + x^j' sum_{k != j} A_jk x^k + (c + E delta)_j . x^j`.
    AffineQuadratic {
        #[serde(rename = "A")]
        a: Vec<Vec<f64>>,
        c: Vec<f64>,
        #[serde(default, rename = "E", skip_serializing_if = "Option::is_none")]
        e: Option<Vec<Vec<f64>>>,
        /// One set per agent in its own coordinates; unconstrained if absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        local_sets: Option<Vec<SetSpec>>,
    },
    /// Consumers with budgets `sum_t x_t >= gamma_j`, `x >= 0`.
    DemandResponse {
        #[serde(rename = "T")]
        t: usize,
        alpha: Hourly,
        beta_price: Hourly,
        gamma: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameFile {
    #[serde(rename = "M")]
    pub m: usize,
    pub dims: Vec<usize>,
    #[serde(flatten)]
    pub model: CostModelSpec,
    /// Cost uncertainty samples; their presence selects the robust equilibrium.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affine: Option<AffineSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub game: Option<GameFile>,
    #[serde(default)]
    pub scenarios: Vec<SetSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub common: Option<SetSpec>,
}

/// How solutions of the built problem map back to the user's variables.
#[derive(Debug, Clone)]
pub enum Layout {
    Plain,
    /// Robust equilibrium through the lifted VI.
    Lifted(Box<(GameSpec, LiftedVi)>),
    /// Robust equilibrium through the epigraph QVI.
    Epigraph(Box<EpigraphQvi>),
}

#[derive(Debug, Clone)]
pub struct BuiltProblem {
    pub problem: ScenarioVIProblem,
    pub layout: Layout,
}

impl BuiltProblem {
    /// The decision `x` and, for robust equilibria, the worst-case levels.
    pub fn decode(&self, y: &DVector<f64>) -> (DVector<f64>, Option<Vec<f64>>) {
        match &self.layout {
            Layout::Plain => (y.clone(), None),
            Layout::Lifted(b) => {
                let (x, levels) = b.1.levels(&b.0, y);
                (x, Some(levels))
            }
            Layout::Epigraph(q) => {
                let (x, levels) = q.levels(y);
                (x, Some(levels))
            }
        }
    }
}

fn matrix(rows: &[Vec<f64>], ncols: usize) -> Result<DMatrix<f64>> {
    for r in rows {
        check_dim(ncols, r.len())?;
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

impl GameFile {
    fn build(&self) -> Result<GameSpec> {
        check_dim(self.m, self.dims.len())?;
        let n: usize = self.dims.iter().sum();
        let mode = if self.samples.is_some() {
            UncertaintyMode::Costs
        } else {
            UncertaintyMode::Constraints
        };
        match &self.model {
            CostModelSpec::AffineQuadratic { a, c, e, local_sets } => {
                let a = matrix(a, n)?;
                check_dim(n, a.nrows())?;
                let e = match e {
                    Some(rows) => {
                        let width = rows.first().map_or(0, Vec::len);
                        Some(matrix(rows, width)?)
                    }
                    None => None,
                };
                let cost = AffineQuadraticCost::new(self.dims.clone(), a, DVector::from_column_slice(c), e)?;
                let local = match local_sets {
                    Some(specs) => {
                        check_dim(self.m, specs.len())?;
                        specs
                            .iter()
                            .zip(&self.dims)
                            .map(|(s, &d)| s.to_set(d).map(LocalSets::Fixed))
                            .collect::<Result<_>>()?
                    }
                    None => self.dims.iter().map(|&d| LocalSets::Fixed(ConvexSet::whole(d))).collect(),
                };
                GameSpec::new(Arc::new(cost), local, mode)
            }
            CostModelSpec::DemandResponse {
                t,
                alpha,
                beta_price,
                gamma,
            } => {
                check_dim(self.m, gamma.len())?;
                if self.dims.iter().any(|d| d != t) {
                    return Err(Error::InvalidInput(format!("every agent dimension must equal T = {t}")));
                }
                if self.samples.is_none() {
                    return Err(Error::InvalidInput(
                        "demand-response games need demand samples".into(),
                    ));
                }
                let cost = DrCost::new(self.m, &alpha.expand(*t)?, &beta_price.expand(*t)?)?;
                let local = gamma
                    .iter()
                    .map(|&g| agent_set(*t, g).map(LocalSets::Fixed))
                    .collect::<Result<_>>()?;
                GameSpec::new(Arc::new(cost), local, mode)
            }
        }
    }

    fn samples(&self) -> Option<Vec<DVector<f64>>> {
        self.samples
            .as_ref()
            .map(|s| s.iter().map(|d| DVector::from_column_slice(d)).collect())
    }
}

fn scenario_sets(specs: &[SetSpec], dim: usize, qvi: bool) -> Result<Vec<ScenarioSet>> {
    specs
        .iter()
        .map(|s| match (s.is_parametrized(), qvi) {
            (true, true) => Ok(ScenarioSet::Parametrized(s.to_parametrized(dim)?)),
            (true, false) => Err(Error::InvalidInput(
                "anchored halfspaces (b_anchor) require QVI mode".into(),
            )),
            (false, _) => Ok(ScenarioSet::Fixed(s.to_set(dim)?)),
        })
        .collect()
}

fn assemble(op: Arc<dyn Operator>, scenarios: Vec<ScenarioSet>, qvi: bool) -> Result<ScenarioVIProblem> {
    if qvi {
        ScenarioVIProblem::new_qvi(op, scenarios)
    } else {
        let fixed = scenarios
            .into_iter()
            .map(|s| match s {
                ScenarioSet::Fixed(c) => c,
                ScenarioSet::Parametrized(_) => unreachable!("rejected by scenario_sets"),
            })
            .collect();
        ScenarioVIProblem::new_vi(op, fixed)
    }
}

impl ProblemFile {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn build(&self, qvi: bool) -> Result<BuiltProblem> {
        match (&self.affine, &self.game) {
            (Some(spec), None) => {
                let n = spec.b.len();
                let a = matrix(&spec.a, n)?;
                check_dim(n, a.nrows())?;
                let op: Arc<dyn Operator> = Arc::new(AffineOperator::new(a, DVector::from_column_slice(&spec.b))?);
                let mut problem = assemble(op, scenario_sets(&self.scenarios, n, qvi)?, qvi)?;
                if let Some(c) = &self.common {
                    problem = problem.with_common(ScenarioSet::Fixed(c.to_set(n)?))?;
                }
                Ok(BuiltProblem {
                    problem,
                    layout: Layout::Plain,
                })
            }
            (None, Some(file)) => {
                let game = file.build()?;
                if self.common.is_some() {
                    return Err(Error::InvalidInput(
                        "games take their deterministic constraints from local_sets".into(),
                    ));
                }
                match file.samples() {
                    Some(samples) => {
                        if !self.scenarios.is_empty() {
                            return Err(Error::InvalidInput(
                                "a game with cost samples takes no scenario sets".into(),
                            ));
                        }
                        if qvi {
                            let q = build_epigraph_qvi(&game, &samples)?;
                            Ok(BuiltProblem {
                                problem: q.problem.clone(),
                                layout: Layout::Epigraph(Box::new(q)),
                            })
                        } else {
                            let lifted = build_lifted_vi(&game, &samples)?;
                            Ok(BuiltProblem {
                                problem: lifted.problem.clone(),
                                layout: Layout::Lifted(Box::new((game, lifted))),
                            })
                        }
                    }
                    None => {
                        let n = game.n();
                        let problem = assemble(pseudo_gradient(&game)?, scenario_sets(&self.scenarios, n, qvi)?, qvi)?
                            .with_common(ScenarioSet::Fixed(game.local_product()?))?;
                        Ok(BuiltProblem {
                            problem,
                            layout: Layout::Plain,
                        })
                    }
                }
            }
            _ => Err(Error::InvalidInput(
                "a problem file names exactly one of \"affine\" and \"game\"".into(),
            )),
        }
    }
}
