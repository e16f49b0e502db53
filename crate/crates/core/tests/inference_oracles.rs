//! Inference checked against independent oracles: exhaustive path
//! enumeration, grid integration, and Monte-Carlo regression.

mod common;

use common::*;
use ndarray::{array, Array1, Array2};
use proptest::prelude::*;
use rand_distr::StandardNormal;

use hhmm::data::ObservationSequence;
use hhmm::inference::{
    self, emission_log_likelihood, forward_backward, forward_backward_scores,
    gaussian_conditional, sequence_log_likelihood, viterbi, viterbi_scores,
};
use hhmm::learning::e_step;
use hhmm::model::{GaussianParams, ModelParameters};

#[test]
fn forward_backward_matches_enumeration() {
    let mut r = rng(10);
    for case in 0..20 {
        let model = random_model(&mut r, 2, 1, &[2]);
        let seq = random_sequence(&model, 4, 0.3, 100 + case);
        let post = forward_backward(&model, &seq).unwrap();
        let oracle = enumerate_paths(&model, &seq);
        assert!(
            (post.log_likelihood - oracle.log_likelihood).abs() < 1e-8,
            "case {case}: loglik {} vs {}",
            post.log_likelihood,
            oracle.log_likelihood
        );
        assert!(max_abs_diff(&post.gamma, &oracle.gamma) < 1e-8, "case {case}: gamma");
        for (a, b) in post.xi.iter().zip(oracle.xi.iter()) {
            assert!((a - b).abs() < 1e-8, "case {case}: xi {a} vs {b}");
        }
    }
}

#[test]
fn viterbi_matches_enumeration_maximum() {
    let mut r = rng(11);
    for case in 0..20 {
        let model = random_model(&mut r, 3, 1, &[2]);
        let seq = random_sequence(&model, 5, 0.25, 200 + case);
        let (path, score) = viterbi(&model, &seq).unwrap();
        let oracle = enumerate_paths(&model, &seq);
        assert!(
            (score - oracle.best_log_prob).abs() < 1e-8,
            "case {case}: score {score} vs {}",
            oracle.best_log_prob
        );
        // Re-scoring the returned path reproduces the reported score.
        let rescored = {
            let mut lp = model.pi[path[0]].ln()
                + emission_log_likelihood(&model, &seq, 0).unwrap()[path[0]];
            for t in 1..seq.num_slots() {
                lp += model.trans[[path[t - 1], path[t]]].ln()
                    + emission_log_likelihood(&model, &seq, t).unwrap()[path[t]];
            }
            lp
        };
        assert!((rescored - score).abs() < 1e-8, "case {case}: rescore");
    }
}

#[test]
fn sequence_log_likelihood_matches_enumeration() {
    let mut r = rng(12);
    let model = random_model(&mut r, 2, 1, &[2]);
    let seqs: Vec<ObservationSequence> = (0..3)
        .map(|k| random_sequence(&model, 4, 0.2, 300 + k))
        .collect();
    let total = sequence_log_likelihood(&model, &seqs).unwrap();
    let expected: f64 = seqs
        .iter()
        .map(|s| enumerate_paths(&model, s).log_likelihood)
        .sum();
    assert!((total - expected).abs() < 1e-8);
}

#[test]
fn e_step_totals_match_enumeration() {
    let mut r = rng(13);
    let model = random_model(&mut r, 2, 1, &[2]);
    let seqs: Vec<ObservationSequence> = (0..2)
        .map(|k| random_sequence(&model, 3, 0.3, 400 + k))
        .collect();
    let (posts, total) = e_step(&model, &seqs).unwrap();
    let expected: f64 = seqs
        .iter()
        .map(|s| enumerate_paths(&model, s).log_likelihood)
        .sum();
    assert!((total - expected).abs() < 1e-8);
    // Permuting sequence order leaves the total unchanged.
    let swapped: Vec<ObservationSequence> = seqs.iter().rev().cloned().collect();
    let (_, total_swapped) = e_step(&model, &swapped).unwrap();
    assert!((total - total_swapped).abs() < 1e-12);
    assert_eq!(posts.len(), 2);
}

#[test]
fn conditional_matches_grid_integration() {
    // Hand case: mean (0,0), cov [[1,.5],[.5,1]], observe x2 = 2.
    let mean = array![0.0, 0.0];
    let cov = array![[1.0, 0.5], [0.5, 1.0]];
    let x2 = 2.0;
    let (cond_mean, cond_cov) =
        gaussian_conditional(&mean.view(), &cov.view(), &[1], &array![x2].view()).unwrap();
    assert!((cond_mean[0] - 1.0).abs() < 1e-12);
    assert!((cond_cov[[0, 0]] - 0.75).abs() < 1e-12);

    // Brute-force quadrature over x1 at fixed x2.
    let step = 1e-3;
    let mut mass = 0.0;
    let mut first = 0.0;
    let mut second = 0.0;
    let mut x1 = -9.0;
    while x1 <= 11.0 {
        let p = gaussian_density(&array![x1, x2], &mean, &cov);
        mass += p;
        first += x1 * p;
        second += x1 * x1 * p;
        x1 += step;
    }
    let grid_mean = first / mass;
    let grid_var = second / mass - grid_mean * grid_mean;
    assert!((grid_mean - cond_mean[0]).abs() < 1e-6, "grid mean {grid_mean}");
    assert!((grid_var - cond_cov[[0, 0]]).abs() < 1e-6, "grid var {grid_var}");
}

/// Empirical linear regression of the missing coordinate on the observed
/// ones over samples of the joint; the fitted prediction must agree with the
/// analytic conditional mean within 3 standard errors.
pub fn mc_regression_case(seed: u64, mean: &Array1<f64>, cov: &Array2<f64>, missing: usize) {
    let dim = mean.len();
    let observed: Vec<usize> = (0..dim).filter(|&i| i != missing).collect();
    let n = 100_000;
    let chol = naive_cholesky(cov);
    let mut r = rng(seed);
    let p = observed.len() + 1;
    let mut xtx = Array2::<f64>::zeros((p, p));
    let mut xty = Array1::<f64>::zeros(p);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let z = Array1::from_shape_fn(dim, |_| r.sample::<f64, _>(StandardNormal));
        let x = mean + &chol.dot(&z);
        let mut row = vec![1.0];
        row.extend(observed.iter().map(|&i| x[i]));
        let y = x[missing];
        for a in 0..p {
            for b in 0..p {
                xtx[[a, b]] += row[a] * row[b];
            }
            xty[a] += row[a] * y;
        }
        samples.push((row, y));
    }
    let beta = solve_dense(&xtx, &xty);
    let rss: f64 = samples
        .iter()
        .map(|(row, y)| {
            let pred: f64 = row.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
            (y - pred) * (y - pred)
        })
        .sum();
    let sigma2 = rss / (n - p) as f64;

    // Evaluate at a probe point one unit off the observed means.
    let x_obs = Array1::from_shape_fn(observed.len(), |k| mean[observed[k]] + 1.0);
    let (cond_mean, _) =
        gaussian_conditional(&mean.view(), &cov.view(), &observed, &x_obs.view()).unwrap();
    let mut probe = vec![1.0];
    probe.extend(x_obs.iter().copied());
    let pred: f64 = probe.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
    // Var(x*ᵀ β̂) = σ² x*ᵀ (XᵀX)⁻¹ x*.
    let solved = solve_dense(&xtx, &Array1::from_vec(probe.clone()));
    let var: f64 = probe.iter().zip(solved.iter()).map(|(a, b)| a * b).sum::<f64>() * sigma2;
    let se = var.sqrt();
    assert!(
        (pred - cond_mean[0]).abs() <= 3.0 * se,
        "seed {seed}: prediction {pred} vs analytic {} (3se = {})",
        cond_mean[0],
        3.0 * se
    );
}

#[test]
fn conditional_matches_monte_carlo_regression() {
    let mean = array![0.5, -1.0, 2.0];
    let cov = array![[2.0, 0.6, 0.3], [0.6, 1.5, -0.4], [0.3, -0.4, 1.2]];
    mc_regression_case(77, &mean, &cov, 0);
}

#[test]
fn mixed_emission_matches_term_oracle() {
    let model = ModelParameters::new(
        array![1.0],
        array![[1.0]],
        vec![GaussianParams {
            mean: array![1.0, -1.0],
            cov: array![[2.0, 0.5], [0.5, 1.0]],
        }],
        vec![vec![array![0.3, 0.7]]],
        vec![],
    )
    .unwrap();
    // One observed Gaussian dim (the second), one observed categorical.
    let seq = ObservationSequence::new(
        hhmm::data::slot_grid(hhmm::sim::default_start(), 1, 10),
        array![[0.0, 0.4]],
        array![[false, true]],
        array![[1]],
        array![[true]],
        vec!["a".into(), "b".into(), "d".into()],
        vec![2],
    )
    .unwrap();
    let row = emission_log_likelihood(&model, &seq, 0).unwrap();
    let marg = gaussian_density(&array![0.4], &array![-1.0], &array![[1.0]]);
    let expected = marg.ln() + 0.7f64.ln();
    assert!((row[0] - expected).abs() < 1e-12, "{} vs {expected}", row[0]);
}

fn delete_continuous_feature(
    model: &ModelParameters,
    seq: &ObservationSequence,
    drop: usize,
) -> (ModelParameters, ObservationSequence) {
    let keep: Vec<usize> = (0..model.num_continuous()).filter(|&c| c != drop).collect();
    let gaussians = model
        .gaussians
        .iter()
        .map(|gp| GaussianParams {
            mean: Array1::from_shape_fn(keep.len(), |r| gp.mean[keep[r]]),
            cov: Array2::from_shape_fn((keep.len(), keep.len()), |(r, c)| {
                gp.cov[[keep[r], keep[c]]]
            }),
        })
        .collect();
    let small_model = ModelParameters::new(
        model.pi.clone(),
        model.trans.clone(),
        gaussians,
        model.discretes.clone(),
        vec![],
    )
    .unwrap();
    let t = seq.num_slots();
    let names: Vec<String> = keep
        .iter()
        .map(|&c| seq.feature_names()[c].clone())
        .chain(seq.discrete_feature_names().iter().cloned())
        .collect();
    let small_seq = ObservationSequence::new(
        seq.timestamps().to_vec(),
        Array2::from_shape_fn((t, keep.len()), |(r, c)| seq.continuous()[[r, keep[c]]]),
        Array2::from_shape_fn((t, keep.len()), |(r, c)| seq.continuous_mask()[[r, keep[c]]]),
        seq.discrete().clone(),
        seq.discrete_mask().clone(),
        names,
        seq.cardinalities().to_vec(),
    )
    .unwrap();
    (small_model, small_seq)
}

fn mask_continuous_feature(seq: &ObservationSequence, drop: usize) -> ObservationSequence {
    let mut mask = seq.continuous_mask().clone();
    for t in 0..seq.num_slots() {
        mask[[t, drop]] = false;
    }
    ObservationSequence::new(
        seq.timestamps().to_vec(),
        seq.continuous().clone(),
        mask,
        seq.discrete().clone(),
        seq.discrete_mask().clone(),
        seq.feature_names().to_vec(),
        seq.cardinalities().to_vec(),
    )
    .unwrap()
}

#[test]
fn masking_a_feature_equals_removing_it() {
    let mut r = rng(21);
    for case in 0..10 {
        let model = random_model(&mut r, 2, 2, &[2]);
        let seq = random_sequence(&model, 30, 0.2, 500 + case);
        let drop = (case % 2) as usize;
        let masked = mask_continuous_feature(&seq, drop);
        let (small_model, small_seq) = delete_continuous_feature(&model, &seq, drop);
        let gamma_masked = forward_backward(&model, &masked).unwrap().gamma;
        let gamma_small = forward_backward(&small_model, &small_seq).unwrap().gamma;
        assert!(
            max_abs_diff(&gamma_masked, &gamma_small) < 1e-8,
            "case {case}"
        );
    }
}

#[test]
fn emission_shift_leaves_posteriors_invariant() {
    let mut r = rng(22);
    let model = random_model(&mut r, 3, 1, &[2]);
    let seq = random_sequence(&model, 12, 0.2, 42);
    let log_b = inference::emission_log_likelihood_matrix(&model, &seq).unwrap();
    let base = forward_backward_scores(&model, &log_b.view()).unwrap();
    let (base_path, _) = viterbi_scores(&model, &log_b.view()).unwrap();

    let mut shifted = log_b.clone();
    let c = 3.7;
    let slot = 5;
    for i in 0..model.num_states() {
        shifted[[slot, i]] += c;
    }
    let moved = forward_backward_scores(&model, &shifted.view()).unwrap();
    let (moved_path, _) = viterbi_scores(&model, &shifted.view()).unwrap();
    assert!(max_abs_diff(&base.gamma, &moved.gamma) < 1e-10);
    assert_eq!(base_path, moved_path);
    assert!((moved.log_likelihood - base.log_likelihood - c).abs() < 1e-9);
}

#[test]
fn viterbi_score_never_exceeds_log_likelihood() {
    let mut r = rng(23);
    for case in 0..50 {
        let model = random_model(&mut r, (case % 3) + 1, (case % 2) + 1, &[2]);
        let seq = random_sequence(&model, 10, 0.3, 600 + case as u64);
        let (_, score) = viterbi(&model, &seq).unwrap();
        let ll = forward_backward(&model, &seq).unwrap().log_likelihood;
        assert!(
            score <= ll + 1e-9,
            "case {case}: viterbi {score} > loglik {ll}"
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Gamma rows and xi slices are normalized, and xi marginalizes to gamma.
    #[test]
    fn posteriors_are_consistent(seed in 0u64..10_000, states in 1usize..=3, t_len in 1usize..=8) {
        let mut r = rng(seed);
        let model = random_model(&mut r, states, 1, &[2]);
        let seq = random_sequence(&model, t_len, 0.3, seed ^ 0xabcd);
        let post = forward_backward(&model, &seq).unwrap();
        for t in 0..t_len {
            let row: f64 = post.gamma.row(t).sum();
            prop_assert!((row - 1.0).abs() < 1e-9);
        }
        for t in 0..t_len.saturating_sub(1) {
            let mut slice_sum = 0.0;
            for i in 0..states {
                let mut row_sum = 0.0;
                for j in 0..states {
                    slice_sum += post.xi[[t, i, j]];
                    row_sum += post.xi[[t, i, j]];
                }
                prop_assert!((row_sum - post.gamma[[t, i]]).abs() < 1e-8);
            }
            prop_assert!((slice_sum - 1.0).abs() < 1e-9);
        }
    }

    /// Sampling with no missingness yields finite emission likelihoods
    /// everywhere.
    #[test]
    fn complete_samples_have_finite_likelihood(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let model = random_model(&mut r, 2, 2, &[2, 3]);
        let seq = random_sequence(&model, 6, 0.0, seed ^ 0x1234);
        for t in 0..seq.num_slots() {
            for v in emission_log_likelihood(&model, &seq, t).unwrap() {
                prop_assert!(v.is_finite());
            }
        }
    }
}
