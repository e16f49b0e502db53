//! Shared test fixtures: exhaustive-enumeration oracles with their own
//! density arithmetic (independent of the library's linear-algebra path),
//! random model generators, and permutation alignment.
#![allow(dead_code)]

use ndarray::{Array1, Array2, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use hhmm::data::ObservationSequence;
use hhmm::model::{GaussianParams, ModelParameters};
use hhmm::sim::{sample_sequence, MissingRates};

/// Determinant and inverse by explicit cofactor formulas (dims 1-3), keeping
/// the oracle independent of the library's Cholesky route.
pub fn small_inverse(m: &Array2<f64>) -> (f64, Array2<f64>) {
    match m.nrows() {
        1 => {
            let det = m[[0, 0]];
            (det, ndarray::array![[1.0 / det]])
        }
        2 => {
            let (a, b, c, d) = (m[[0, 0]], m[[0, 1]], m[[1, 0]], m[[1, 1]]);
            let det = a * d - b * c;
            (
                det,
                ndarray::array![[d / det, -b / det], [-c / det, a / det]],
            )
        }
        3 => {
            let a = m;
            let det = a[[0, 0]] * (a[[1, 1]] * a[[2, 2]] - a[[1, 2]] * a[[2, 1]])
                - a[[0, 1]] * (a[[1, 0]] * a[[2, 2]] - a[[1, 2]] * a[[2, 0]])
                + a[[0, 2]] * (a[[1, 0]] * a[[2, 1]] - a[[1, 1]] * a[[2, 0]]);
            let mut inv = Array2::zeros((3, 3));
            for r in 0..3 {
                for c in 0..3 {
                    let mut sub = [0.0; 4];
                    let mut k = 0;
                    for rr in 0..3 {
                        for cc in 0..3 {
                            if rr != r && cc != c {
                                sub[k] = a[[rr, cc]];
                                k += 1;
                            }
                        }
                    }
                    let cof = (sub[0] * sub[3] - sub[1] * sub[2])
                        * if (r + c) % 2 == 0 { 1.0 } else { -1.0 };
                    inv[[c, r]] = cof / det;
                }
            }
            (det, inv)
        }
        n => panic!("small_inverse supports dims 1-3, got {n}"),
    }
}

/// Multivariate normal density by the textbook formula over explicit
/// inverse/determinant.
pub fn gaussian_density(x: &Array1<f64>, mean: &Array1<f64>, cov: &Array2<f64>) -> f64 {
    let k = x.len();
    let (det, inv) = small_inverse(cov);
    let centered = x - mean;
    let mut quad = 0.0;
    for r in 0..k {
        for c in 0..k {
            quad += centered[r] * inv[[r, c]] * centered[c];
        }
    }
    (-0.5 * quad).exp() / ((2.0 * std::f64::consts::PI).powi(k as i32) * det).sqrt()
}

/// Emission probability of the observed parts of slot `t` under `state`,
/// recomputed from first principles.
pub fn oracle_emission(params: &ModelParameters, seq: &ObservationSequence, t: usize, state: usize) -> f64 {
    let observed = seq.observed_continuous(t);
    let mut p = 1.0;
    if !observed.is_empty() {
        let gp = &params.gaussians[state];
        let mean = Array1::from_shape_fn(observed.len(), |r| gp.mean[observed[r]]);
        let cov = Array2::from_shape_fn((observed.len(), observed.len()), |(r, c)| {
            gp.cov[[observed[r], observed[c]]]
        });
        let x = Array1::from_shape_fn(observed.len(), |r| seq.continuous()[[t, observed[r]]]);
        p *= gaussian_density(&x, &mean, &cov);
    }
    for j in 0..seq.num_discrete() {
        if seq.discrete_mask()[[t, j]] {
            p *= params.discretes[state][j][seq.discrete()[[t, j]]];
        }
    }
    p
}

pub struct EnumerationOracle {
    pub gamma: Array2<f64>,
    pub xi: Array3<f64>,
    pub log_likelihood: f64,
    pub best_log_prob: f64,
}

/// Sum (and maximize) over every possible state path.
pub fn enumerate_paths(params: &ModelParameters, seq: &ObservationSequence) -> EnumerationOracle {
    let t_len = seq.num_slots();
    let states = params.num_states();
    let emissions = Array2::from_shape_fn((t_len, states), |(t, i)| {
        oracle_emission(params, seq, t, i)
    });

    let mut total = 0.0;
    let mut best = 0.0f64;
    let mut gamma_acc = Array2::<f64>::zeros((t_len, states));
    let mut xi_acc = Array3::<f64>::zeros((t_len.saturating_sub(1), states, states));

    let paths = states.pow(t_len as u32);
    for code in 0..paths {
        let mut path = Vec::with_capacity(t_len);
        let mut rest = code;
        for _ in 0..t_len {
            path.push(rest % states);
            rest /= states;
        }
        let mut w = params.pi[path[0]] * emissions[[0, path[0]]];
        for t in 1..t_len {
            w *= params.trans[[path[t - 1], path[t]]] * emissions[[t, path[t]]];
        }
        total += w;
        if w > best {
            best = w;
        }
        for (t, &s) in path.iter().enumerate() {
            gamma_acc[[t, s]] += w;
        }
        for t in 0..t_len.saturating_sub(1) {
            xi_acc[[t, path[t], path[t + 1]]] += w;
        }
    }

    EnumerationOracle {
        gamma: gamma_acc / total,
        xi: xi_acc / total,
        log_likelihood: total.ln(),
        best_log_prob: best.ln(),
    }
}

/// Deterministic rng for a test case.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Probability vector with entries bounded away from zero.
pub fn random_probs(rng: &mut ChaCha8Rng, len: usize) -> Array1<f64> {
    let raw: Vec<f64> = (0..len).map(|_| rng.random_range(0.1..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    Array1::from_vec(raw.into_iter().map(|v| v / sum).collect())
}

/// Random well-conditioned SPD matrix.
pub fn random_spd(rng: &mut ChaCha8Rng, dim: usize) -> Array2<f64> {
    let a = Array2::from_shape_fn((dim, dim), |_| rng.random_range(-1.0..1.0));
    let mut spd = Array2::zeros((dim, dim));
    for r in 0..dim {
        for c in 0..dim {
            let mut v = 0.0;
            for k in 0..dim {
                v += a[[r, k]] * a[[c, k]];
            }
            spd[[r, c]] = v;
        }
    }
    for d in 0..dim {
        spd[[d, d]] += 0.3;
    }
    spd
}

/// Random model with bounded-away-from-zero probabilities.
pub fn random_model(
    rng: &mut ChaCha8Rng,
    states: usize,
    num_continuous: usize,
    cardinalities: &[usize],
) -> ModelParameters {
    let pi = random_probs(rng, states);
    let mut trans = Array2::zeros((states, states));
    for i in 0..states {
        trans.row_mut(i).assign(&random_probs(rng, states));
    }
    let gaussians = (0..states)
        .map(|_| GaussianParams {
            mean: Array1::from_shape_fn(num_continuous, |_| rng.random_range(-2.0..2.0)),
            cov: random_spd(rng, num_continuous),
        })
        .collect();
    let discretes = (0..states)
        .map(|_| {
            cardinalities
                .iter()
                .map(|&c| random_probs(rng, c))
                .collect()
        })
        .collect();
    ModelParameters::new(pi, trans, gaussians, discretes, vec![]).unwrap()
}

/// Random sequence sampled from the model with uniform per-feature missing
/// rates.
pub fn random_sequence(
    model: &ModelParameters,
    len: usize,
    missing: f64,
    seed: u64,
) -> ObservationSequence {
    let rates = MissingRates::uniform(model.num_continuous(), model.num_discrete(), missing);
    sample_sequence(model, len, &rates, seed).unwrap().1
}

/// All permutations of 0..n (Heap's algorithm).
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut items: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    fn heap(k: usize, items: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == 1 {
            out.push(items.clone());
            return;
        }
        for i in 0..k {
            heap(k - 1, items, out);
            if k % 2 == 0 {
                items.swap(i, k - 1);
            } else {
                items.swap(0, k - 1);
            }
        }
    }
    heap(n, &mut items, &mut out);
    out
}

/// Permutation (new -> old) minimizing the summed mean distance between
/// matched states.
pub fn best_state_permutation(truth: &ModelParameters, fitted: &ModelParameters) -> Vec<usize> {
    let states = truth.num_states();
    let mut best_perm = (0..states).collect::<Vec<_>>();
    let mut best_cost = f64::INFINITY;
    for perm in permutations(states) {
        let mut cost = 0.0;
        for (new, &old) in perm.iter().enumerate() {
            let d = &truth.gaussians[new].mean - &fitted.gaussians[old].mean;
            cost += d.iter().map(|v| v * v).sum::<f64>();
        }
        if cost < best_cost {
            best_cost = cost;
            best_perm = perm;
        }
    }
    best_perm
}

/// Largest absolute difference between two matrices.
pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Hand-rolled Cholesky for the Monte-Carlo oracle's sampler (independent of
/// the library's factorization).
pub fn naive_cholesky(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                l[[i, j]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    l
}

/// Solve a small linear system by Gaussian elimination with partial
/// pivoting; used by the regression oracle.
pub fn solve_dense(a: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    let mut rhs = b.clone();
    for col in 0..n {
        let mut pivot = col;
        for r in col + 1..n {
            if m[[r, col]].abs() > m[[pivot, col]].abs() {
                pivot = r;
            }
        }
        if pivot != col {
            for c in 0..n {
                let tmp = m[[col, c]];
                m[[col, c]] = m[[pivot, c]];
                m[[pivot, c]] = tmp;
            }
            rhs.swap(col, pivot);
        }
        let diag = m[[col, col]];
        for r in col + 1..n {
            let f = m[[r, col]] / diag;
            for c in col..n {
                m[[r, c]] -= f * m[[col, c]];
            }
            rhs[r] -= f * rhs[col];
        }
    }
    let mut x = Array1::<f64>::zeros(n);
    for r in (0..n).rev() {
        let mut sum = rhs[r];
        for c in r + 1..n {
            sum -= m[[r, c]] * x[c];
        }
        x[r] = sum / m[[r, r]];
    }
    x
}
