//! Parameter counting and BIC/AIC sweeps over the number of hidden states.

use serde::Serialize;

use crate::data::ObservationSequence;
use crate::error::{Error, Result};
use crate::learning::{fit, CovarianceType, FitConfig};
use crate::model::{ClampEntry, Constraints};

/// One candidate state count with its fit quality and both criteria.
#[derive(Debug, Clone, Serialize)]
pub struct SelectionRow {
    pub num_states: usize,
    pub log_likelihood: Option<f64>,
    pub parameter_count: usize,
    pub bic: Option<f64>,
    pub aic: Option<f64>,
    /// Fit failure for this candidate, if any; failed rows are excluded from
    /// the argmin.
    pub error: Option<String>,
}

/// Free parameters of a model: initial distribution, transition rows,
/// Gaussian means plus covariances, and categorical tables, minus one per
/// clamped entry.
pub fn count_parameters(
    num_states: usize,
    num_continuous: usize,
    cardinalities: &[usize],
    covariance: CovarianceType,
    clamp: &[ClampEntry],
) -> usize {
    let i = num_states;
    let g = num_continuous;
    let cov_params = match covariance {
        CovarianceType::Full => g * (g + 1) / 2,
        CovarianceType::Diagonal => g,
    };
    let chain = (i - 1) + i * (i - 1);
    let gaussian = i * (g + cov_params);
    let discrete: usize = cardinalities.iter().map(|&c| i * (c - 1)).sum();
    chain + gaussian + discrete - clamp.len()
}

/// Bayesian information criterion; lower is better. `n` is the number of
/// observed scalar cells across the training data.
pub fn bic(log_likelihood: f64, parameter_count: usize, n: usize) -> f64 {
    -2.0 * log_likelihood + parameter_count as f64 * (n as f64).ln()
}

/// Akaike information criterion; lower is better.
pub fn aic(log_likelihood: f64, parameter_count: usize) -> f64 {
    2.0 * parameter_count as f64 - 2.0 * log_likelihood
}

/// Effective sample size for the BIC penalty: observed scalar cells, not
/// slots, so missing data shrinks the penalty accordingly.
pub fn observed_cell_count(seqs: &[ObservationSequence]) -> usize {
    seqs.iter().map(|s| s.observed_cells()).sum()
}

/// Result of a state-count sweep.
#[derive(Debug, Clone)]
pub struct SweepResult {
    /// One row per candidate, ordered by state count.
    pub rows: Vec<SelectionRow>,
    /// Minimum-BIC candidate among the successful rows; ties toward the
    /// smaller state count.
    pub chosen: usize,
}

/// Fit every candidate state count with a shared seed and pick the
/// minimum-BIC model.
pub fn sweep_states(
    seqs: &[ObservationSequence],
    state_counts: impl IntoIterator<Item = usize>,
    constraints: &Constraints,
    config: &FitConfig,
) -> Result<SweepResult> {
    let mut counts: Vec<usize> = state_counts.into_iter().collect();
    counts.sort_unstable();
    counts.dedup();
    if counts.is_empty() {
        return Err(Error::InvalidArgument("empty state-count range".into()));
    }
    let n = observed_cell_count(seqs);
    if n == 0 {
        return Err(Error::InvalidArgument(
            "no observed cells in the training data".into(),
        ));
    }
    let mut rows = Vec::with_capacity(counts.len());
    for &i in &counts {
        let k = count_parameters(
            i,
            seqs[0].num_continuous(),
            seqs[0].cardinalities(),
            config.covariance,
            &constraints.fixed_entries,
        );
        match fit(seqs, i, constraints, config) {
            Ok(result) => {
                let ll = result.log_likelihood();
                rows.push(SelectionRow {
                    num_states: i,
                    log_likelihood: Some(ll),
                    parameter_count: k,
                    bic: Some(bic(ll, k, n)),
                    aic: Some(aic(ll, k)),
                    error: None,
                });
            }
            Err(e) => rows.push(SelectionRow {
                num_states: i,
                log_likelihood: None,
                parameter_count: k,
                bic: None,
                aic: None,
                error: Some(e.to_string()),
            }),
        }
    }
    let chosen = rows
        .iter()
        .filter_map(|r| r.bic.map(|b| (r.num_states, b)))
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .ok_or(Error::SweepFailed)?;
    Ok(SweepResult { rows, chosen })
}
