//! Model parameters, constraints, and validation.

use std::collections::BTreeSet;
use std::fmt;

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Minimum eigenvalue enforced on every state covariance. Guards EM against
/// degenerate updates on sparse or constant features.
pub const COVARIANCE_FLOOR: f64 = 1e-6;

/// Tolerance on probability-vector sums.
pub const PROB_SUM_TOL: f64 = 1e-9;

/// Gaussian emission parameters of one hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
}

/// One fixed discrete emission probability: `p(feature = category | state)`
/// is pinned to `prob` and excluded from learning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClampEntry {
    pub state: usize,
    pub feature: usize,
    pub category: usize,
    pub prob: f64,
}

/// Full parameter set of a heterogeneous hidden Markov model: initial state
/// distribution, transition matrix, per-state Gaussian over the continuous
/// features, and per-state categorical tables over the discrete features.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub pi: Array1<f64>,
    pub trans: Array2<f64>,
    pub gaussians: Vec<GaussianParams>,
    /// `discretes[state][feature]` is a probability vector over categories.
    pub discretes: Vec<Vec<Array1<f64>>>,
    pub clamp: Vec<ClampEntry>,
}

impl ModelParameters {
    /// Construct with shape checks only; probabilistic invariants are the
    /// business of [`ModelParameters::validate`].
    pub fn new(
        pi: Array1<f64>,
        trans: Array2<f64>,
        gaussians: Vec<GaussianParams>,
        discretes: Vec<Vec<Array1<f64>>>,
        clamp: Vec<ClampEntry>,
    ) -> Result<Self> {
        let states = pi.len();
        if states == 0 {
            return Err(Error::Shape("model needs at least one state".into()));
        }
        if trans.nrows() != states || trans.ncols() != states {
            return Err(Error::Shape(format!(
                "transition matrix is {}x{}, expected {states}x{states}",
                trans.nrows(),
                trans.ncols()
            )));
        }
        if gaussians.len() != states || discretes.len() != states {
            return Err(Error::Shape(format!(
                "expected {states} per-state emission blocks, got {} gaussians and {} discrete tables",
                gaussians.len(),
                discretes.len()
            )));
        }
        let g = gaussians[0].mean.len();
        for (i, gp) in gaussians.iter().enumerate() {
            if gp.mean.len() != g || gp.cov.nrows() != g || gp.cov.ncols() != g {
                return Err(Error::Shape(format!(
                    "state {i} gaussian has inconsistent dimensions"
                )));
            }
        }
        let j = discretes[0].len();
        for (i, tables) in discretes.iter().enumerate() {
            if tables.len() != j {
                return Err(Error::Shape(format!(
                    "state {i} has {} discrete tables, expected {j}",
                    tables.len()
                )));
            }
            for (jj, table) in tables.iter().enumerate() {
                if table.len() != discretes[0][jj].len() {
                    return Err(Error::Shape(format!(
                        "state {i} feature {jj} table length differs across states"
                    )));
                }
                if table.len() < 2 {
                    return Err(Error::Shape(format!(
                        "feature {jj} needs at least 2 categories"
                    )));
                }
            }
        }
        for entry in &clamp {
            if entry.state >= states
                || entry.feature >= j
                || entry.category >= discretes[0][entry.feature].len()
            {
                return Err(Error::Shape(format!(
                    "clamp entry out of range: state {}, feature {}, category {}",
                    entry.state, entry.feature, entry.category
                )));
            }
        }
        Ok(ModelParameters {
            pi,
            trans,
            gaussians,
            discretes,
            clamp,
        })
    }

    pub fn num_states(&self) -> usize {
        self.pi.len()
    }

    pub fn num_continuous(&self) -> usize {
        self.gaussians[0].mean.len()
    }

    pub fn num_discrete(&self) -> usize {
        self.discretes[0].len()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.discretes[0].iter().map(|t| t.len()).collect()
    }

    /// Check every model invariant, returning the full list of violations.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        let pi_sum: f64 = self.pi.sum();
        if (pi_sum - 1.0).abs() > PROB_SUM_TOL {
            violations.push(Violation::PiSum { sum: pi_sum });
        }
        for (idx, &p) in self.pi.iter().enumerate() {
            if p < 0.0 {
                violations.push(Violation::NegativeProbability {
                    location: format!("pi[{idx}]"),
                    value: p,
                });
            }
        }
        for state in 0..self.num_states() {
            let row_sum: f64 = self.trans.row(state).sum();
            if (row_sum - 1.0).abs() > PROB_SUM_TOL {
                violations.push(Violation::TransRowSum {
                    state,
                    sum: row_sum,
                });
            }
            for (col, &p) in self.trans.row(state).iter().enumerate() {
                if p < 0.0 {
                    violations.push(Violation::NegativeProbability {
                        location: format!("trans[{state}][{col}]"),
                        value: p,
                    });
                }
            }
        }
        for (state, gp) in self.gaussians.iter().enumerate() {
            if gp.mean.len() > 0 {
                let asym = linalg::max_asymmetry(&gp.cov.view());
                if asym > PROB_SUM_TOL {
                    violations.push(Violation::NonSymmetricCovariance {
                        state,
                        max_asymmetry: asym,
                    });
                } else {
                    let min_eig = linalg::min_symmetric_eigenvalue(&gp.cov.view());
                    if min_eig < COVARIANCE_FLOOR - PROB_SUM_TOL {
                        violations.push(Violation::CovarianceBelowFloor {
                            state,
                            min_eigenvalue: min_eig,
                        });
                    }
                }
            }
        }
        for (state, tables) in self.discretes.iter().enumerate() {
            for (feature, table) in tables.iter().enumerate() {
                let sum: f64 = table.sum();
                if (sum - 1.0).abs() > PROB_SUM_TOL {
                    violations.push(Violation::DiscreteSum {
                        state,
                        feature,
                        sum,
                    });
                }
                for (cat, &p) in table.iter().enumerate() {
                    if p < 0.0 {
                        violations.push(Violation::NegativeProbability {
                            location: format!("discretes[{state}][{feature}][{cat}]"),
                            value: p,
                        });
                    }
                }
            }
        }
        for entry in &self.clamp {
            let actual = self.discretes[entry.state][entry.feature][entry.category];
            if actual != entry.prob {
                violations.push(Violation::ClampViolated {
                    state: entry.state,
                    feature: entry.feature,
                    category: entry.category,
                    expected: entry.prob,
                    actual,
                });
            }
        }
        ValidationReport { violations }
    }

    /// Validate and convert violations into an error.
    pub fn validated(self) -> Result<Self> {
        let report = self.validate();
        if report.is_ok() {
            Ok(self)
        } else {
            Err(Error::InvalidModel(report))
        }
    }

    /// Apply the covariance floor to every state.
    pub fn apply_covariance_floor(&mut self) {
        for gp in &mut self.gaussians {
            if gp.mean.len() > 0 {
                linalg::floor_spd(&mut gp.cov, COVARIANCE_FLOOR);
            }
        }
    }

    /// Relabel states by `perm`, where `perm[new] = old`.
    pub fn permuted(&self, perm: &[usize]) -> ModelParameters {
        let states = self.num_states();
        assert_eq!(perm.len(), states);
        let pi = Array1::from_shape_fn(states, |i| self.pi[perm[i]]);
        let trans = Array2::from_shape_fn((states, states), |(i, j)| {
            self.trans[[perm[i], perm[j]]]
        });
        let gaussians = perm.iter().map(|&old| self.gaussians[old].clone()).collect();
        let discretes = perm.iter().map(|&old| self.discretes[old].clone()).collect();
        let inverse: Vec<usize> = {
            let mut inv = vec![0; states];
            for (new, &old) in perm.iter().enumerate() {
                inv[old] = new;
            }
            inv
        };
        let clamp = self
            .clamp
            .iter()
            .map(|e| ClampEntry {
                state: inverse[e.state],
                ..*e
            })
            .collect();
        ModelParameters {
            pi,
            trans,
            gaussians,
            discretes,
            clamp,
        }
    }
}

/// A single violated model invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    PiSum { sum: f64 },
    TransRowSum { state: usize, sum: f64 },
    DiscreteSum { state: usize, feature: usize, sum: f64 },
    NonSymmetricCovariance { state: usize, max_asymmetry: f64 },
    CovarianceBelowFloor { state: usize, min_eigenvalue: f64 },
    NegativeProbability { location: String, value: f64 },
    ClampViolated {
        state: usize,
        feature: usize,
        category: usize,
        expected: f64,
        actual: f64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::PiSum { sum } => write!(f, "pi sums to {sum}"),
            Violation::TransRowSum { state, sum } => {
                write!(f, "transition row {state} sums to {sum}")
            }
            Violation::DiscreteSum { state, feature, sum } => {
                write!(f, "discrete table for state {state}, feature {feature} sums to {sum}")
            }
            Violation::NonSymmetricCovariance { state, max_asymmetry } => {
                write!(f, "state {state} covariance is asymmetric by {max_asymmetry:e}")
            }
            Violation::CovarianceBelowFloor { state, min_eigenvalue } => write!(
                f,
                "state {state} covariance minimum eigenvalue {min_eigenvalue} is below the covariance floor {COVARIANCE_FLOOR:e}"
            ),
            Violation::NegativeProbability { location, value } => {
                write!(f, "{location} is negative ({value})")
            }
            Violation::ClampViolated {
                state,
                feature,
                category,
                expected,
                actual,
            } => write!(
                f,
                "clamped entry (state {state}, feature {feature}, category {category}) holds {actual}, expected exactly {expected}"
            ),
        }
    }
}

/// Outcome of [`ModelParameters::validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "ok");
        }
        let mut first = true;
        for v in &self.violations {
            if !first {
                write!(f, "; ")?;
            }
            write!(f, "{v}")?;
            first = false;
        }
        Ok(())
    }
}

/// Semi-supervised training constraints: fixed discrete emission entries and
/// the states to read out as "asleep".
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Constraints {
    pub fixed_entries: Vec<ClampEntry>,
    pub sleep_states: BTreeSet<usize>,
}

impl Constraints {
    pub fn none() -> Self {
        Constraints::default()
    }

    /// Check index ranges, per-(state, feature) probability budgets, and
    /// duplicate entries against a model shape.
    pub fn check(&self, num_states: usize, cardinalities: &[usize]) -> Result<()> {
        let mut seen = BTreeSet::new();
        let mut budget: std::collections::BTreeMap<(usize, usize), f64> =
            std::collections::BTreeMap::new();
        for e in &self.fixed_entries {
            if e.state >= num_states {
                return Err(Error::InvalidArgument(format!(
                    "clamp state {} out of range (model has {num_states} states)",
                    e.state
                )));
            }
            if e.feature >= cardinalities.len() {
                return Err(Error::InvalidArgument(format!(
                    "clamp feature {} out of range ({} discrete features)",
                    e.feature,
                    cardinalities.len()
                )));
            }
            if e.category >= cardinalities[e.feature] {
                return Err(Error::InvalidArgument(format!(
                    "clamp category {} out of range (feature {} has {} categories)",
                    e.category, e.feature, cardinalities[e.feature]
                )));
            }
            if !(0.0..=1.0).contains(&e.prob) {
                return Err(Error::InvalidArgument(format!(
                    "clamp probability {} outside [0, 1]",
                    e.prob
                )));
            }
            if !seen.insert((e.state, e.feature, e.category)) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate clamp entry (state {}, feature {}, category {})",
                    e.state, e.feature, e.category
                )));
            }
            *budget.entry((e.state, e.feature)).or_insert(0.0) += e.prob;
        }
        for (&(state, feature), &sum) in &budget {
            if sum > 1.0 + PROB_SUM_TOL {
                return Err(Error::InvalidArgument(format!(
                    "fixed probabilities for state {state}, feature {feature} sum to {sum} > 1"
                )));
            }
        }
        for &s in &self.sleep_states {
            if s >= num_states {
                return Err(Error::InvalidArgument(format!(
                    "sleep state {s} out of range (model has {num_states} states)"
                )));
            }
        }
        Ok(())
    }
}

/// Forward-backward sufficient statistics for one sequence.
#[derive(Debug, Clone)]
pub struct Posteriors {
    /// `gamma[[t, i]] = p(s_t = i | all observations)`, rows sum to 1.
    pub gamma: Array2<f64>,
    /// `xi[[t, i, j]] = p(s_t = i, s_{t+1} = j | all observations)`.
    pub xi: Array3<f64>,
    pub log_likelihood: f64,
}
