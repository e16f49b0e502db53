//! Emission likelihoods with missing data, scaled forward-backward, and
//! Viterbi decoding.
//!
//! All recursions run in log space with per-step normalization, so multi-day
//! concatenations (T well beyond 10^5) cannot underflow. Unobserved features
//! are marginalized exactly: the continuous block contributes the Gaussian
//! marginal density over the observed dimensions only, and a fully missing
//! slot contributes nothing.

use std::collections::HashMap;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};

use crate::data::ObservationSequence;
use crate::error::{Error, Result};
use crate::linalg::{self, log_sum_exp, SpdFactor};
use crate::model::{ModelParameters, Posteriors, COVARIANCE_FLOOR};

const LOG_2PI: f64 = 1.8378770664093453;

/// Sub-mean and sub-covariance of a Gaussian restricted to `observed_idx`.
pub fn gaussian_marginal(
    mean: &ArrayView1<f64>,
    cov: &ArrayView2<f64>,
    observed_idx: &[usize],
) -> Result<(Array1<f64>, Array2<f64>)> {
    if observed_idx.is_empty() {
        return Err(Error::EmptyIndexSet);
    }
    check_indices(observed_idx, mean.len())?;
    let sub_mean = Array1::from_shape_fn(observed_idx.len(), |r| mean[observed_idx[r]]);
    let sub_cov = Array2::from_shape_fn((observed_idx.len(), observed_idx.len()), |(r, c)| {
        cov[[observed_idx[r], observed_idx[c]]]
    });
    Ok((sub_mean, sub_cov))
}

/// A Gaussian split into its missing (block 1) and observed (block 2) parts,
/// including the matching blocks of the precision matrix.
#[derive(Debug, Clone)]
pub struct GaussianPartition {
    pub observed_idx: Vec<usize>,
    pub missing_idx: Vec<usize>,
    /// Mean over the missing block.
    pub missing_mean: Array1<f64>,
    /// Mean over the observed block.
    pub observed_mean: Array1<f64>,
    pub cov_mm: Array2<f64>,
    pub cov_mo: Array2<f64>,
    pub cov_om: Array2<f64>,
    pub cov_oo: Array2<f64>,
    pub prec_mm: Array2<f64>,
    pub prec_mo: Array2<f64>,
    pub prec_om: Array2<f64>,
    pub prec_oo: Array2<f64>,
}

impl GaussianPartition {
    /// Split `(mean, cov)` by the observed index set; the missing block is
    /// the complement. Requires both blocks to be nonempty.
    pub fn new(
        mean: &ArrayView1<f64>,
        cov: &ArrayView2<f64>,
        observed_idx: &[usize],
    ) -> Result<Self> {
        let dim = mean.len();
        if cov.nrows() != dim || cov.ncols() != dim {
            return Err(Error::Shape(format!(
                "covariance is {}x{}, mean has length {dim}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        check_indices(observed_idx, dim)?;
        let missing_idx: Vec<usize> =
            (0..dim).filter(|i| !observed_idx.contains(i)).collect();
        if observed_idx.is_empty() || missing_idx.is_empty() {
            return Err(Error::EmptyIndexSet);
        }

        let take_vec = |idx: &[usize]| Array1::from_shape_fn(idx.len(), |r| mean[idx[r]]);
        let take_mat = |rows: &[usize], cols: &[usize]| {
            Array2::from_shape_fn((rows.len(), cols.len()), |(r, c)| cov[[rows[r], cols[c]]])
        };

        // Precision blocks come from the inverse of the full covariance in
        // [missing; observed] order.
        let order: Vec<usize> = missing_idx.iter().chain(observed_idx.iter()).copied().collect();
        let permuted = Array2::from_shape_fn((dim, dim), |(r, c)| cov[[order[r], order[c]]]);
        let (factor, _) = linalg::cholesky_with_floor(&permuted.view(), COVARIANCE_FLOOR)?;
        let precision = factor.inverse();
        let m = missing_idx.len();
        let slice = |r0: usize, r1: usize, c0: usize, c1: usize| {
            Array2::from_shape_fn((r1 - r0, c1 - c0), |(r, c)| precision[[r0 + r, c0 + c]])
        };

        Ok(GaussianPartition {
            missing_mean: take_vec(&missing_idx),
            observed_mean: take_vec(observed_idx),
            cov_mm: take_mat(&missing_idx, &missing_idx),
            cov_mo: take_mat(&missing_idx, observed_idx),
            cov_om: take_mat(observed_idx, &missing_idx),
            cov_oo: take_mat(observed_idx, observed_idx),
            prec_mm: slice(0, m, 0, m),
            prec_mo: slice(0, m, m, dim),
            prec_om: slice(m, dim, 0, m),
            prec_oo: slice(m, dim, m, dim),
            observed_idx: observed_idx.to_vec(),
            missing_idx,
        })
    }

    /// Conditional distribution of the missing block given observed values,
    /// through the Schur complement:
    /// mean = μ₁ + Σ₁₂ Σ₂₂⁻¹ (x₂ − μ₂), cov = Σ₁₁ − Σ₁₂ Σ₂₂⁻¹ Σ₂₁.
    pub fn conditional(&self, observed_values: &ArrayView1<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        let (factor, _) = linalg::cholesky_with_floor(&self.cov_oo.view(), COVARIANCE_FLOOR)?;
        let centered = observed_values - &self.observed_mean;
        let solved = factor.solve(&centered.view());
        let mean = &self.missing_mean + &self.cov_mo.dot(&solved);
        let cov = &self.cov_mm - &self.cov_mo.dot(&factor.solve_matrix(&self.cov_om.view()));
        Ok((mean, cov))
    }

    /// Same distribution through the precision blocks:
    /// mean = μ₁ − Λ₁₁⁻¹ Λ₁₂ (x₂ − μ₂), cov = Λ₁₁⁻¹.
    pub fn conditional_precision(
        &self,
        observed_values: &ArrayView1<f64>,
    ) -> Result<(Array1<f64>, Array2<f64>)> {
        let factor = SpdFactor::new(&self.prec_mm.view()).ok_or(Error::SingularCovariance)?;
        let centered = observed_values - &self.observed_mean;
        let mean = &self.missing_mean - &factor.solve(&self.prec_mo.dot(&centered).view());
        let cov = factor.inverse();
        Ok((mean, cov))
    }
}

/// Mean and covariance of the missing block given observed values; the
/// Schur-complement route of [`GaussianPartition::conditional`].
pub fn gaussian_conditional(
    mean: &ArrayView1<f64>,
    cov: &ArrayView2<f64>,
    observed_idx: &[usize],
    observed_values: &ArrayView1<f64>,
) -> Result<(Array1<f64>, Array2<f64>)> {
    if observed_values.len() != observed_idx.len() {
        return Err(Error::Shape(format!(
            "{} observed values for {} observed indices",
            observed_values.len(),
            observed_idx.len()
        )));
    }
    GaussianPartition::new(mean, cov, observed_idx)?.conditional(observed_values)
}

fn check_indices(idx: &[usize], dim: usize) -> Result<()> {
    let mut seen = vec![false; dim];
    for &i in idx {
        if i >= dim {
            return Err(Error::Shape(format!("index {i} out of bounds for dimension {dim}")));
        }
        if seen[i] {
            return Err(Error::Shape(format!("duplicate index {i}")));
        }
        seen[i] = true;
    }
    Ok(())
}

/// Per-state marginal Gaussian evaluators, cached by observed-feature
/// pattern. Rebuilt whenever the parameters change; lookups never allocate
/// beyond the first encounter of a pattern.
pub(crate) struct EmissionTable<'a> {
    params: &'a ModelParameters,
    marginals: Vec<HashMap<u64, MarginalDensity>>,
}

struct MarginalDensity {
    mean: Array1<f64>,
    factor: SpdFactor,
    log_norm: f64,
}

impl<'a> EmissionTable<'a> {
    pub fn new(params: &'a ModelParameters) -> Self {
        EmissionTable {
            params,
            marginals: (0..params.num_states()).map(|_| HashMap::new()).collect(),
        }
    }

    fn marginal(&mut self, state: usize, pattern: u64, observed: &[usize]) -> Result<&MarginalDensity> {
        if !self.marginals[state].contains_key(&pattern) {
            let gp = &self.params.gaussians[state];
            let (mean, cov) = gaussian_marginal(&gp.mean.view(), &gp.cov.view(), observed)?;
            let (factor, _) = linalg::cholesky_with_floor(&cov.view(), COVARIANCE_FLOOR)?;
            let log_norm = -0.5 * (observed.len() as f64 * LOG_2PI + factor.log_det());
            self.marginals[state].insert(
                pattern,
                MarginalDensity {
                    mean,
                    factor,
                    log_norm,
                },
            );
        }
        Ok(&self.marginals[state][&pattern])
    }

    /// log p(observed features at slot t | state) for every state.
    pub fn log_likelihood_row(&mut self, seq: &ObservationSequence, t: usize) -> Result<Vec<f64>> {
        let states = self.params.num_states();
        let pattern = seq.continuous_pattern(t);
        let observed = seq.observed_continuous(t);
        let mut row = vec![0.0; states];
        if !observed.is_empty() {
            let values = Array1::from_shape_fn(observed.len(), |r| seq.continuous()[[t, observed[r]]]);
            for (state, slot) in row.iter_mut().enumerate() {
                let density = self.marginal(state, pattern, &observed)?;
                let centered = &values - &density.mean;
                *slot += density.log_norm - 0.5 * density.factor.inv_quadratic(&centered.view());
            }
        }
        for jj in 0..seq.num_discrete() {
            if seq.discrete_mask()[[t, jj]] {
                let v = seq.discrete()[[t, jj]];
                for (state, slot) in row.iter_mut().enumerate() {
                    *slot += self.params.discretes[state][jj][v].ln();
                }
            }
        }
        Ok(row)
    }
}

fn check_compat(params: &ModelParameters, seq: &ObservationSequence) -> Result<()> {
    if params.num_continuous() != seq.num_continuous() {
        return Err(Error::Shape(format!(
            "model has {} continuous features, sequence has {}",
            params.num_continuous(),
            seq.num_continuous()
        )));
    }
    if params.num_discrete() != seq.num_discrete() {
        return Err(Error::Shape(format!(
            "model has {} discrete features, sequence has {}",
            params.num_discrete(),
            seq.num_discrete()
        )));
    }
    let model_cards = params.cardinalities();
    if model_cards != seq.cardinalities() {
        return Err(Error::Shape(format!(
            "cardinalities differ: model {model_cards:?}, sequence {:?}",
            seq.cardinalities()
        )));
    }
    Ok(())
}

/// log p(observed slot t | s_t = i) for each state i. Fully missing slots
/// yield the zero vector.
pub fn emission_log_likelihood(
    params: &ModelParameters,
    seq: &ObservationSequence,
    t: usize,
) -> Result<Vec<f64>> {
    check_compat(params, seq)?;
    if t >= seq.num_slots() {
        return Err(Error::Shape(format!(
            "slot {t} out of range for sequence of length {}",
            seq.num_slots()
        )));
    }
    EmissionTable::new(params).log_likelihood_row(seq, t)
}

/// The full T×I matrix of per-slot emission log-likelihoods.
pub fn emission_log_likelihood_matrix(
    params: &ModelParameters,
    seq: &ObservationSequence,
) -> Result<Array2<f64>> {
    check_compat(params, seq)?;
    let mut table = EmissionTable::new(params);
    let mut out = Array2::zeros((seq.num_slots(), params.num_states()));
    for t in 0..seq.num_slots() {
        let row = table.log_likelihood_row(seq, t)?;
        out.row_mut(t).assign(&Array1::from_vec(row));
    }
    Ok(out)
}

/// Scaled forward-backward over a precomputed emission log-likelihood matrix.
pub fn forward_backward_scores(
    params: &ModelParameters,
    log_emissions: &ArrayView2<f64>,
) -> Result<Posteriors> {
    let t_len = log_emissions.nrows();
    let states = params.num_states();
    if t_len == 0 {
        return Err(Error::Shape("empty emission matrix".into()));
    }
    if log_emissions.ncols() != states {
        return Err(Error::Shape(format!(
            "emission matrix has {} columns, model has {states} states",
            log_emissions.ncols()
        )));
    }

    let log_pi: Vec<f64> = params.pi.iter().map(|&p| p.ln()).collect();
    let log_trans = params.trans.mapv(f64::ln);

    // Forward pass, normalized per step; the normalizers sum to the sequence
    // log-likelihood.
    let mut log_alpha = Array2::zeros((t_len, states));
    let mut log_likelihood = 0.0;
    let mut scratch = vec![0.0f64; states];
    for i in 0..states {
        log_alpha[[0, i]] = log_pi[i] + log_emissions[[0, i]];
    }
    let c0 = log_sum_exp(log_alpha.row(0).as_slice().unwrap());
    if !c0.is_finite() {
        return Err(Error::EmissionUnderflow { t: 0 });
    }
    log_likelihood += c0;
    log_alpha.row_mut(0).mapv_inplace(|v| v - c0);

    for t in 1..t_len {
        for i in 0..states {
            for (j, s) in scratch.iter_mut().enumerate() {
                *s = log_alpha[[t - 1, j]] + log_trans[[j, i]];
            }
            log_alpha[[t, i]] = log_sum_exp(&scratch) + log_emissions[[t, i]];
        }
        let c = log_sum_exp(log_alpha.row(t).as_slice().unwrap());
        if !c.is_finite() {
            return Err(Error::EmissionUnderflow { t });
        }
        log_likelihood += c;
        log_alpha.row_mut(t).mapv_inplace(|v| v - c);
    }

    // Backward pass with the same per-step normalization; any positive
    // rescaling cancels in gamma and xi.
    let mut log_beta = Array2::zeros((t_len, states));
    for t in (0..t_len - 1).rev() {
        for i in 0..states {
            for (j, s) in scratch.iter_mut().enumerate() {
                *s = log_trans[[i, j]] + log_emissions[[t + 1, j]] + log_beta[[t + 1, j]];
            }
            log_beta[[t, i]] = log_sum_exp(&scratch);
        }
        let c = log_sum_exp(log_beta.row(t).as_slice().unwrap());
        if !c.is_finite() {
            return Err(Error::EmissionUnderflow { t: t + 1 });
        }
        log_beta.row_mut(t).mapv_inplace(|v| v - c);
    }

    let mut gamma = Array2::zeros((t_len, states));
    for t in 0..t_len {
        for i in 0..states {
            scratch[i] = log_alpha[[t, i]] + log_beta[[t, i]];
        }
        let norm = log_sum_exp(&scratch);
        for i in 0..states {
            gamma[[t, i]] = (scratch[i] - norm).exp();
        }
    }

    let mut xi = Array3::zeros((t_len.saturating_sub(1), states, states));
    let mut pair = vec![0.0f64; states * states];
    for t in 0..t_len.saturating_sub(1) {
        for i in 0..states {
            for j in 0..states {
                pair[i * states + j] = log_alpha[[t, i]]
                    + log_trans[[i, j]]
                    + log_emissions[[t + 1, j]]
                    + log_beta[[t + 1, j]];
            }
        }
        let norm = log_sum_exp(&pair);
        for i in 0..states {
            for j in 0..states {
                xi[[t, i, j]] = (pair[i * states + j] - norm).exp();
            }
        }
    }

    Ok(Posteriors {
        gamma,
        xi,
        log_likelihood,
    })
}

/// State marginals, pairwise marginals, and sequence log-likelihood.
pub fn forward_backward(params: &ModelParameters, seq: &ObservationSequence) -> Result<Posteriors> {
    let log_emissions = emission_log_likelihood_matrix(params, seq)?;
    forward_backward_scores(params, &log_emissions.view())
}

/// Viterbi decoding over a precomputed emission log-likelihood matrix. Ties
/// break toward the smallest state index.
pub fn viterbi_scores(
    params: &ModelParameters,
    log_emissions: &ArrayView2<f64>,
) -> Result<(Vec<usize>, f64)> {
    let t_len = log_emissions.nrows();
    let states = params.num_states();
    if t_len == 0 {
        return Err(Error::Shape("empty emission matrix".into()));
    }
    let log_trans = params.trans.mapv(f64::ln);

    let mut delta = Array2::zeros((t_len, states));
    let mut backptr = Array2::zeros((t_len, states));
    for i in 0..states {
        delta[[0, i]] = params.pi[i].ln() + log_emissions[[0, i]];
    }
    if delta.row(0).iter().all(|v| !v.is_finite()) {
        return Err(Error::EmissionUnderflow { t: 0 });
    }
    for t in 1..t_len {
        for i in 0..states {
            let mut best_j = 0;
            let mut best = f64::NEG_INFINITY;
            for j in 0..states {
                let cand = delta[[t - 1, j]] + log_trans[[j, i]];
                if cand > best {
                    best = cand;
                    best_j = j;
                }
            }
            delta[[t, i]] = best + log_emissions[[t, i]];
            backptr[[t, i]] = best_j;
        }
        if delta.row(t).iter().all(|v| !v.is_finite()) {
            return Err(Error::EmissionUnderflow { t });
        }
    }

    let mut best_state = 0;
    let mut best_score = f64::NEG_INFINITY;
    for i in 0..states {
        if delta[[t_len - 1, i]] > best_score {
            best_score = delta[[t_len - 1, i]];
            best_state = i;
        }
    }
    let mut path = vec![0usize; t_len];
    path[t_len - 1] = best_state;
    for t in (0..t_len - 1).rev() {
        path[t] = backptr[[t + 1, path[t + 1]]];
    }
    Ok((path, best_score))
}

/// Most probable state path and its joint log-probability with the observed
/// data.
pub fn viterbi(params: &ModelParameters, seq: &ObservationSequence) -> Result<(Vec<usize>, f64)> {
    let log_emissions = emission_log_likelihood_matrix(params, seq)?;
    viterbi_scores(params, &log_emissions.view())
}

/// Total log p(observations | parameters) summed over independent sequences.
pub fn sequence_log_likelihood(
    params: &ModelParameters,
    seqs: &[ObservationSequence],
) -> Result<f64> {
    let mut total = 0.0;
    for seq in seqs {
        total += forward_backward(params, seq)?.log_likelihood;
    }
    Ok(total)
}
