//! Baum-Welch training over multiple heterogeneous sequences with missing
//! data and clamped (semi-supervised) discrete emissions.
//!
//! Missing continuous values never enter the E-step: the emission likelihood
//! marginalizes them exactly. They matter only when accumulating Gaussian
//! moments in the M-step, where each missing block is completed with its
//! conditional mean given the observed block under the current parameters,
//! and the conditional covariance is added to the scatter. Fully missing
//! rows fall back to the state mean and full state covariance. Discrete
//! features with missing cells are dropped from both the count numerator and
//! denominator.

use std::collections::HashMap;

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{self, Seeding};
use crate::data::ObservationSequence;
use crate::error::{Error, Result};
use crate::inference::forward_backward;
use crate::linalg;
use crate::model::{Constraints, GaussianParams, ModelParameters, Posteriors, COVARIANCE_FLOOR};

/// A state whose total posterior mass falls below this is treated as
/// collapsed.
pub const STATE_COLLAPSE_MASS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    Kmeans,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceType {
    Full,
    Diagonal,
}

/// EM hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub max_iterations: usize,
    /// Stop when the relative log-likelihood improvement drops below this.
    pub tolerance: f64,
    pub init: InitStrategy,
    pub restarts: usize,
    pub seed: u64,
    pub covariance: CovarianceType,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_iterations: 200,
            tolerance: 1e-6,
            init: InitStrategy::Kmeans,
            restarts: 5,
            seed: 0,
            covariance: CovarianceType::Full,
        }
    }
}

impl FitConfig {
    fn check(&self) -> Result<()> {
        if self.tolerance <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidArgument("restarts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Outcome of [`fit`].
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParameters,
    /// Log-likelihood at each E-step; the last entry scores `params`.
    pub trace: Vec<f64>,
    /// Index of the winning restart.
    pub restart: usize,
    pub converged: bool,
}

impl FitResult {
    pub fn log_likelihood(&self) -> f64 {
        *self.trace.last().expect("trace is never empty")
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Decorrelate restart streams from the base seed.
pub(crate) fn restart_seed(base: u64, restart: usize) -> u64 {
    splitmix64(base ^ splitmix64(restart as u64 + 1))
}

fn check_alignment(seqs: &[ObservationSequence]) -> Result<()> {
    if seqs.is_empty() {
        return Err(Error::InvalidArgument("no sequences to fit".into()));
    }
    let g = seqs[0].num_continuous();
    let j = seqs[0].num_discrete();
    let cards = seqs[0].cardinalities();
    for (n, seq) in seqs.iter().enumerate() {
        if seq.num_continuous() != g || seq.num_discrete() != j || seq.cardinalities() != cards {
            return Err(Error::Shape(format!(
                "sequence {n} does not share the feature schema of sequence 0"
            )));
        }
    }
    Ok(())
}

/// Overwrite clamped entries with their fixed values and renormalize the
/// remaining mass over the free categories.
fn apply_clamp(table: &mut Array1<f64>, fixed: &[(usize, f64)]) {
    if fixed.is_empty() {
        return;
    }
    let mut fixed_mass = 0.0;
    let mut is_fixed = vec![false; table.len()];
    for &(cat, prob) in fixed {
        is_fixed[cat] = true;
        fixed_mass += prob;
    }
    let free_mass: f64 = table
        .iter()
        .enumerate()
        .filter(|(c, _)| !is_fixed[*c])
        .map(|(_, &p)| p)
        .sum();
    let target = (1.0 - fixed_mass).max(0.0);
    let free_count = is_fixed.iter().filter(|&&f| !f).count();
    for (c, p) in table.iter_mut().enumerate() {
        if !is_fixed[c] {
            *p = if free_mass > 0.0 {
                *p / free_mass * target
            } else if free_count > 0 {
                target / free_count as f64
            } else {
                0.0
            };
        }
    }
    for &(cat, prob) in fixed {
        table[cat] = prob;
    }
}

fn clamp_for(constraints: &Constraints, state: usize, feature: usize) -> Vec<(usize, f64)> {
    constraints
        .fixed_entries
        .iter()
        .filter(|e| e.state == state && e.feature == feature)
        .map(|e| (e.category, e.prob))
        .collect()
}

/// Per-feature mean over observed cells, pooled across sequences. Features
/// with no observed cells impute as 0.
fn observed_feature_means(seqs: &[ObservationSequence]) -> Array1<f64> {
    let g = seqs[0].num_continuous();
    let mut sums = Array1::<f64>::zeros(g);
    let mut counts = vec![0usize; g];
    for seq in seqs {
        for ((_, col), &observed) in seq.continuous_mask().indexed_iter() {
            if observed {
                counts[col] += 1;
            }
        }
        for ((row, col), &v) in seq.continuous().indexed_iter() {
            if seq.continuous_mask()[[row, col]] {
                sums[col] += v;
            }
        }
    }
    for col in 0..g {
        if counts[col] > 0 {
            sums[col] /= counts[col] as f64;
        } else {
            sums[col] = 0.0;
        }
    }
    sums
}

/// Mean-imputed slot rows that have at least one observed continuous cell.
fn usable_rows(seqs: &[ObservationSequence], means: &Array1<f64>) -> Array2<f64> {
    let g = seqs[0].num_continuous();
    let mut rows = Vec::new();
    for seq in seqs {
        for t in 0..seq.num_slots() {
            if (0..g).any(|col| seq.continuous_mask()[[t, col]]) {
                let mut row = vec![0.0; g];
                for (col, slot) in row.iter_mut().enumerate() {
                    *slot = if seq.continuous_mask()[[t, col]] {
                        seq.continuous()[[t, col]]
                    } else {
                        means[col]
                    };
                }
                rows.push(row);
            }
        }
    }
    let n = rows.len();
    Array2::from_shape_fn((n, g), |(r, c)| rows[r][c])
}

fn scatter_around(points: &Array2<f64>, rows: &[usize], center: &Array1<f64>) -> Array2<f64> {
    let g = points.ncols();
    let mut cov = Array2::zeros((g, g));
    for &r in rows {
        let d = &points.row(r) - center;
        for a in 0..g {
            for b in 0..g {
                cov[[a, b]] += d[a] * d[b];
            }
        }
    }
    if !rows.is_empty() {
        cov /= rows.len() as f64;
    }
    cov
}

/// Empirical frequency of each clamped-to-zero (feature, category) pair
/// inside a set of slots. Used to start clamped states on the clusters least
/// in conflict with their hard zeros.
fn zero_clamp_conflict(
    seqs: &[ObservationSequence],
    slots: &[(usize, usize)],
    zero_entries: &[(usize, usize)],
) -> f64 {
    if zero_entries.is_empty() || slots.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut seen = 0usize;
    for &(n, t) in slots {
        for &(feature, category) in zero_entries {
            if seqs[n].discrete_mask()[[t, feature]] {
                seen += 1;
                if seqs[n].discrete()[[t, feature]] == category {
                    hits += 1;
                }
            }
        }
    }
    if seen == 0 {
        0.0
    } else {
        hits as f64 / seen as f64
    }
}

/// Initial parameters: uniform chain, k-means (or random-row) Gaussians over
/// mean-imputed rows, uniform-then-clamped discrete tables.
pub fn initialize(
    seqs: &[ObservationSequence],
    num_states: usize,
    config: &FitConfig,
    constraints: &Constraints,
) -> Result<ModelParameters> {
    check_alignment(seqs)?;
    if num_states == 0 {
        return Err(Error::InvalidArgument("need at least one state".into()));
    }
    let g = seqs[0].num_continuous();
    let j = seqs[0].num_discrete();
    let cards = seqs[0].cardinalities().to_vec();
    constraints.check(num_states, &cards)?;

    let pi = Array1::from_elem(num_states, 1.0 / num_states as f64);
    let trans = Array2::from_elem((num_states, num_states), 1.0 / num_states as f64);

    let mut gaussians = Vec::with_capacity(num_states);
    // Slot coordinates (sequence, slot) of every usable row, aligned with the
    // rows of the imputed matrix.
    let mut slot_coords: Vec<(usize, usize)> = Vec::new();
    if g > 0 {
        let means = observed_feature_means(seqs);
        for (n, seq) in seqs.iter().enumerate() {
            for t in 0..seq.num_slots() {
                if (0..g).any(|col| seq.continuous_mask()[[t, col]]) {
                    slot_coords.push((n, t));
                }
            }
        }
        let points = usable_rows(seqs, &means);
        if points.nrows() < num_states {
            return Err(Error::NotEnoughRows {
                requested: num_states,
                usable: points.nrows(),
            });
        }
        let global_cov = {
            let all: Vec<usize> = (0..points.nrows()).collect();
            let center = cluster::centroid_of(&points.view(), &all);
            scatter_around(&points, &all, &center)
        };
        let (centroids, assignments) = match config.init {
            InitStrategy::Kmeans => {
                let fit = cluster::kmeans(
                    &points.view(),
                    num_states,
                    Seeding::PlusPlus(config.seed),
                    300,
                    1e-6,
                )?;
                (fit.centroids, fit.assignments)
            }
            InitStrategy::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                let mut picked = Vec::with_capacity(num_states);
                while picked.len() < num_states {
                    let idx = rng.random_range(0..points.nrows());
                    if !picked.contains(&idx) {
                        picked.push(idx);
                    }
                }
                let centroids = Array2::from_shape_fn((num_states, g), |(r, c)| {
                    points[[picked[r], c]]
                });
                let assignments = (0..points.nrows())
                    .map(|r| {
                        let mut best = 0;
                        let mut best_d = f64::INFINITY;
                        for (s, &p) in picked.iter().enumerate() {
                            let d: f64 = (0..g)
                                .map(|c| (points[[r, c]] - points[[p, c]]).powi(2))
                                .sum();
                            if d < best_d {
                                best = s;
                                best_d = d;
                            }
                        }
                        best
                    })
                    .collect();
                (centroids, assignments)
            }
        };

        // Map clusters onto states. States with hard-zero clamps take the
        // clusters whose members least often show the banned categories.
        let cluster_members: Vec<Vec<usize>> = {
            let mut members = vec![Vec::new(); num_states];
            for (r, &c) in assignments.iter().enumerate() {
                members[c].push(r);
            }
            members
        };
        let state_cluster = assign_clusters_to_states(
            seqs,
            &slot_coords,
            &cluster_members,
            num_states,
            constraints,
        );

        for state in 0..num_states {
            let c = state_cluster[state];
            let members = &cluster_members[c];
            let mean = if members.is_empty() {
                centroids.row(c).to_owned()
            } else {
                cluster::centroid_of(&points.view(), members)
            };
            let mut cov = if members.len() > 1 {
                scatter_around(&points, members, &mean)
            } else {
                global_cov.clone()
            };
            linalg::floor_spd(&mut cov, COVARIANCE_FLOOR);
            if let CovarianceType::Diagonal = config.covariance {
                let diag = Array2::from_diag(&cov.diag().to_owned());
                cov = diag;
                linalg::floor_spd(&mut cov, COVARIANCE_FLOOR);
            }
            gaussians.push(GaussianParams { mean, cov });
        }
    } else {
        for _ in 0..num_states {
            gaussians.push(GaussianParams {
                mean: Array1::zeros(0),
                cov: Array2::zeros((0, 0)),
            });
        }
    }

    let mut discretes = Vec::with_capacity(num_states);
    for state in 0..num_states {
        let mut tables = Vec::with_capacity(j);
        for (feature, &c) in cards.iter().enumerate() {
            let mut table = Array1::from_elem(c, 1.0 / c as f64);
            apply_clamp(&mut table, &clamp_for(constraints, state, feature));
            tables.push(table);
        }
        discretes.push(tables);
    }

    ModelParameters::new(pi, trans, gaussians, discretes, constraints.fixed_entries.clone())
}

/// Greedy cluster-to-state assignment honoring zero clamps; identity mapping
/// when no state is clamped to zero.
fn assign_clusters_to_states(
    seqs: &[ObservationSequence],
    slot_coords: &[(usize, usize)],
    cluster_members: &[Vec<usize>],
    num_states: usize,
    constraints: &Constraints,
) -> Vec<usize> {
    let mut zero_entries: Vec<(usize, Vec<(usize, usize)>)> = Vec::new();
    for state in 0..num_states {
        let entries: Vec<(usize, usize)> = constraints
            .fixed_entries
            .iter()
            .filter(|e| e.state == state && e.prob == 0.0)
            .map(|e| (e.feature, e.category))
            .collect();
        if !entries.is_empty() {
            zero_entries.push((state, entries));
        }
    }
    let mut assignment: Vec<Option<usize>> = vec![None; num_states];
    let mut taken = vec![false; num_states];
    if !zero_entries.is_empty() {
        let conflicts: Vec<Vec<f64>> = (0..num_states)
            .map(|c| {
                let slots: Vec<(usize, usize)> = cluster_members[c]
                    .iter()
                    .map(|&r| slot_coords[r])
                    .collect();
                zero_entries
                    .iter()
                    .map(|(_, entries)| zero_clamp_conflict(seqs, &slots, entries))
                    .collect()
            })
            .collect();
        for (pos, &(state, _)) in zero_entries.iter().enumerate() {
            let mut best = None;
            for c in 0..num_states {
                if taken[c] {
                    continue;
                }
                match best {
                    None => best = Some(c),
                    Some(b) if conflicts[c][pos] < conflicts[b][pos] => best = Some(c),
                    _ => {}
                }
            }
            let c = best.expect("fewer clusters than states");
            assignment[state] = Some(c);
            taken[c] = true;
        }
    }
    let mut free = (0..num_states).filter(|&c| !taken[c]);
    assignment
        .into_iter()
        .map(|slot| slot.unwrap_or_else(|| free.next().expect("cluster count matches state count")))
        .collect()
}

/// Forward-backward over every sequence plus the pooled log-likelihood.
/// Sequences are evaluated in parallel; results keep the input order.
pub fn e_step(
    params: &ModelParameters,
    seqs: &[ObservationSequence],
) -> Result<(Vec<Posteriors>, f64)> {
    let posts: Vec<Posteriors> = seqs
        .par_iter()
        .map(|seq| forward_backward(params, seq))
        .collect::<Result<_>>()?;
    let total = posts.iter().map(|p| p.log_likelihood).sum();
    Ok((posts, total))
}

/// Regression blocks for completing one missing pattern of one state.
struct CompletionBlocks {
    observed: Vec<usize>,
    missing: Vec<usize>,
    mean_o: Array1<f64>,
    mean_m: Array1<f64>,
    /// Σ_mo Σ_oo⁻¹.
    reg: Array2<f64>,
    /// Σ_mm − Σ_mo Σ_oo⁻¹ Σ_om.
    cond_cov: Array2<f64>,
}

fn completion_blocks(gp: &GaussianParams, observed: &[usize]) -> Result<CompletionBlocks> {
    let g = gp.mean.len();
    let missing: Vec<usize> = (0..g).filter(|i| !observed.contains(i)).collect();
    let take = |rows: &[usize], cols: &[usize]| {
        Array2::from_shape_fn((rows.len(), cols.len()), |(r, c)| {
            gp.cov[[rows[r], cols[c]]]
        })
    };
    let cov_oo = take(observed, observed);
    let cov_om = take(observed, &missing);
    let cov_mm = take(&missing, &missing);
    let (factor, _) = linalg::cholesky_with_floor(&cov_oo.view(), COVARIANCE_FLOOR)?;
    let solved = factor.solve_matrix(&cov_om.view()); // Σ_oo⁻¹ Σ_om
    let reg = solved.t().to_owned();
    let cond_cov = &cov_mm - &reg.dot(&cov_om);
    Ok(CompletionBlocks {
        mean_o: Array1::from_shape_fn(observed.len(), |r| gp.mean[observed[r]]),
        mean_m: Array1::from_shape_fn(missing.len(), |r| gp.mean[missing[r]]),
        observed: observed.to_vec(),
        missing,
        reg,
        cond_cov,
    })
}

/// One maximization step. Gaussian moments use completions under `current`;
/// clamped discrete entries are restored exactly after the update.
pub fn m_step(
    seqs: &[ObservationSequence],
    posteriors: &[Posteriors],
    current: &ModelParameters,
    constraints: &Constraints,
    config: &FitConfig,
) -> Result<ModelParameters> {
    check_alignment(seqs)?;
    let states = current.num_states();
    let g = current.num_continuous();
    let j = current.num_discrete();
    let cards = current.cardinalities();
    if posteriors.len() != seqs.len() {
        return Err(Error::Shape(format!(
            "{} posterior blocks for {} sequences",
            posteriors.len(),
            seqs.len()
        )));
    }
    for (n, (seq, post)) in seqs.iter().zip(posteriors.iter()).enumerate() {
        if post.gamma.nrows() != seq.num_slots() || post.gamma.ncols() != states {
            return Err(Error::Shape(format!(
                "posterior {n} does not match its sequence"
            )));
        }
    }

    // Chain statistics.
    let mut pi_acc = Array1::<f64>::zeros(states);
    let mut trans_acc = Array2::<f64>::zeros((states, states));
    let mut mass = vec![0.0f64; states];
    for post in posteriors {
        for i in 0..states {
            pi_acc[i] += post.gamma[[0, i]];
        }
        for t in 0..post.xi.shape()[0] {
            for i in 0..states {
                for jj in 0..states {
                    trans_acc[[i, jj]] += post.xi[[t, i, jj]];
                }
            }
        }
        for t in 0..post.gamma.nrows() {
            for i in 0..states {
                mass[i] += post.gamma[[t, i]];
            }
        }
    }
    for (state, &m) in mass.iter().enumerate() {
        if m < STATE_COLLAPSE_MASS {
            return Err(Error::StateCollapse { state, mass: m });
        }
    }
    let pi = &pi_acc / pi_acc.sum();
    let mut trans = Array2::zeros((states, states));
    for i in 0..states {
        let row_sum: f64 = trans_acc.row(i).sum();
        if row_sum > STATE_COLLAPSE_MASS {
            for jj in 0..states {
                trans[[i, jj]] = trans_acc[[i, jj]] / row_sum;
            }
        } else {
            // No transition mass out of this state (e.g. it only appears at
            // sequence ends); keep its current row.
            trans.row_mut(i).assign(&current.trans.row(i));
        }
    }

    // Gaussian moments with per-(state, pattern) completion blocks.
    let mut gaussians = Vec::with_capacity(states);
    if g > 0 {
        let mut blocks: Vec<HashMap<u64, CompletionBlocks>> =
            (0..states).map(|_| HashMap::new()).collect();
        let mut weight = vec![0.0f64; states];
        let mut mean_acc = vec![Array1::<f64>::zeros(g); states];
        let mut second_acc = vec![Array2::<f64>::zeros((g, g)); states];
        let full_pattern: u64 = if g == 64 { u64::MAX } else { (1 << g) - 1 };

        let mut completed = Array1::<f64>::zeros(g);
        for (seq, post) in seqs.iter().zip(posteriors.iter()) {
            for t in 0..seq.num_slots() {
                let pattern = seq.continuous_pattern(t);
                for i in 0..states {
                    let w = post.gamma[[t, i]];
                    weight[i] += w;
                    if pattern == full_pattern {
                        for c in 0..g {
                            completed[c] = seq.continuous()[[t, c]];
                        }
                        accumulate_moments(
                            &mut mean_acc[i],
                            &mut second_acc[i],
                            &completed,
                            None,
                            &[],
                            w,
                        );
                    } else if pattern == 0 {
                        let gp = &current.gaussians[i];
                        completed.assign(&gp.mean);
                        let all: Vec<usize> = (0..g).collect();
                        accumulate_moments(
                            &mut mean_acc[i],
                            &mut second_acc[i],
                            &completed,
                            Some(&gp.cov),
                            &all,
                            w,
                        );
                    } else {
                        if !blocks[i].contains_key(&pattern) {
                            let observed = seq.observed_continuous(t);
                            blocks[i].insert(
                                pattern,
                                completion_blocks(&current.gaussians[i], &observed)?,
                            );
                        }
                        let block = &blocks[i][&pattern];
                        let x_o = Array1::from_shape_fn(block.observed.len(), |r| {
                            seq.continuous()[[t, block.observed[r]]]
                        });
                        let cond_mean = &block.mean_m + &block.reg.dot(&(&x_o - &block.mean_o));
                        for (r, &c) in block.observed.iter().enumerate() {
                            completed[c] = x_o[r];
                        }
                        for (r, &c) in block.missing.iter().enumerate() {
                            completed[c] = cond_mean[r];
                        }
                        accumulate_moments(
                            &mut mean_acc[i],
                            &mut second_acc[i],
                            &completed,
                            Some(&block.cond_cov),
                            &block.missing,
                            w,
                        );
                    }
                }
            }
        }
        for i in 0..states {
            let w = weight[i];
            let mean = &mean_acc[i] / w;
            let mut cov = &second_acc[i] / w;
            for a in 0..g {
                for b in 0..g {
                    cov[[a, b]] -= mean[a] * mean[b];
                }
            }
            if let CovarianceType::Diagonal = config.covariance {
                for a in 0..g {
                    for b in 0..g {
                        if a != b {
                            cov[[a, b]] = 0.0;
                        }
                    }
                }
            }
            linalg::floor_spd(&mut cov, COVARIANCE_FLOOR);
            gaussians.push(GaussianParams { mean, cov });
        }
    } else {
        for _ in 0..states {
            gaussians.push(GaussianParams {
                mean: Array1::zeros(0),
                cov: Array2::zeros((0, 0)),
            });
        }
    }

    // Discrete tables: gamma-weighted counts over observed slots only.
    let mut discretes = Vec::with_capacity(states);
    for i in 0..states {
        let mut tables = Vec::with_capacity(j);
        for (feature, &c) in cards.iter().enumerate() {
            let mut counts = Array1::<f64>::zeros(c);
            let mut denom = 0.0;
            for (seq, post) in seqs.iter().zip(posteriors.iter()) {
                for t in 0..seq.num_slots() {
                    if seq.discrete_mask()[[t, feature]] {
                        let w = post.gamma[[t, i]];
                        counts[seq.discrete()[[t, feature]]] += w;
                        denom += w;
                    }
                }
            }
            let mut table = if denom > STATE_COLLAPSE_MASS {
                counts / denom
            } else {
                current.discretes[i][feature].clone()
            };
            apply_clamp(&mut table, &clamp_for(constraints, i, feature));
            tables.push(table);
        }
        discretes.push(tables);
    }

    ModelParameters::new(
        pi,
        trans,
        gaussians,
        discretes,
        constraints.fixed_entries.clone(),
    )
}

/// Add `w * [completed, completed completedᵀ + C]` where `C` embeds
/// `cond_cov` on the `missing × missing` block.
fn accumulate_moments(
    mean_acc: &mut Array1<f64>,
    second_acc: &mut Array2<f64>,
    completed: &Array1<f64>,
    cond_cov: Option<&Array2<f64>>,
    missing: &[usize],
    w: f64,
) {
    let g = completed.len();
    for a in 0..g {
        mean_acc[a] += w * completed[a];
        for b in 0..g {
            second_acc[[a, b]] += w * completed[a] * completed[b];
        }
    }
    if let Some(cc) = cond_cov {
        for (ra, &a) in missing.iter().enumerate() {
            for (rb, &b) in missing.iter().enumerate() {
                second_acc[[a, b]] += w * cc[[ra, rb]];
            }
        }
    }
}

/// EM from explicit initial parameters; no restarts.
pub fn fit_with_init(
    init: ModelParameters,
    seqs: &[ObservationSequence],
    constraints: &Constraints,
    config: &FitConfig,
) -> Result<FitResult> {
    check_alignment(seqs)?;
    config.check()?;
    constraints.check(init.num_states(), &init.cardinalities())?;
    let mut params = init;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut m_steps = 0;
    loop {
        let (posts, ll) = e_step(&params, seqs)?;
        if let Some(&prev) = trace.last() {
            trace.push(ll);
            let rel = (ll - prev) / prev.abs().max(1e-12);
            if rel < config.tolerance {
                converged = true;
                break;
            }
        } else {
            trace.push(ll);
        }
        if m_steps >= config.max_iterations {
            break;
        }
        m_steps += 1;
        params = m_step(seqs, &posts, &params, constraints, config)?;
    }
    Ok(FitResult {
        params,
        trace,
        restart: 0,
        converged,
    })
}

/// Full Baum-Welch: `config.restarts` independent initializations, best
/// final log-likelihood wins (ties toward the lower restart index).
pub fn fit(
    seqs: &[ObservationSequence],
    num_states: usize,
    constraints: &Constraints,
    config: &FitConfig,
) -> Result<FitResult> {
    check_alignment(seqs)?;
    config.check()?;
    let mut best: Option<FitResult> = None;
    let mut last_err: Option<Error> = None;
    for r in 0..config.restarts {
        let mut restart_config = *config;
        restart_config.seed = restart_seed(config.seed, r);
        let attempt = initialize(seqs, num_states, &restart_config, constraints)
            .and_then(|init| fit_with_init(init, seqs, constraints, config));
        match attempt {
            Ok(mut result) => {
                result.restart = r;
                let better = match &best {
                    None => true,
                    Some(b) => result.log_likelihood() > b.log_likelihood(),
                };
                if better {
                    best = Some(result);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    match best {
        Some(result) => Ok(result),
        None => Err(Error::AllRestartsFailed {
            restarts: config.restarts,
            last: Box::new(last_err.expect("restarts >= 1")),
        }),
    }
}

/// User-facing reconstruction of the continuous block: per slot, the
/// gamma-weighted mixture of per-state completions. Observed cells are
/// returned unchanged.
pub fn impute_missing(
    params: &ModelParameters,
    seq: &ObservationSequence,
    posteriors: &Posteriors,
) -> Result<Array2<f64>> {
    let g = params.num_continuous();
    let states = params.num_states();
    if posteriors.gamma.nrows() != seq.num_slots() || posteriors.gamma.ncols() != states {
        return Err(Error::Shape("posteriors do not match the sequence".into()));
    }
    let mut out = Array2::zeros((seq.num_slots(), g));
    let mut blocks: Vec<HashMap<u64, CompletionBlocks>> =
        (0..states).map(|_| HashMap::new()).collect();
    let full_pattern: u64 = if g == 64 { u64::MAX } else { (1u64 << g) - 1 };
    for t in 0..seq.num_slots() {
        let pattern = seq.continuous_pattern(t);
        for c in 0..g {
            if seq.continuous_mask()[[t, c]] {
                out[[t, c]] = seq.continuous()[[t, c]];
            }
        }
        if pattern == full_pattern {
            continue;
        }
        for i in 0..states {
            let w = posteriors.gamma[[t, i]];
            if pattern == 0 {
                for c in 0..g {
                    out[[t, c]] += w * params.gaussians[i].mean[c];
                }
            } else {
                if !blocks[i].contains_key(&pattern) {
                    let observed = seq.observed_continuous(t);
                    blocks[i].insert(pattern, completion_blocks(&params.gaussians[i], &observed)?);
                }
                let block = &blocks[i][&pattern];
                let x_o = Array1::from_shape_fn(block.observed.len(), |r| {
                    seq.continuous()[[t, block.observed[r]]]
                });
                let cond_mean = &block.mean_m + &block.reg.dot(&(&x_o - &block.mean_o));
                for (r, &c) in block.missing.iter().enumerate() {
                    out[[t, c]] += w * cond_mean[r];
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::slot_grid;
    use crate::model::ClampEntry;
    use crate::sim::{default_start, sample_sequence, MissingRates};
    use ndarray::array;
    use std::collections::BTreeSet;

    fn two_state_model() -> ModelParameters {
        ModelParameters::new(
            array![0.5, 0.5],
            array![[0.9, 0.1], [0.1, 0.9]],
            vec![
                GaussianParams {
                    mean: array![-3.0],
                    cov: array![[1.0]],
                },
                GaussianParams {
                    mean: array![3.0],
                    cov: array![[1.0]],
                },
            ],
            vec![
                vec![array![0.9, 0.1]],
                vec![array![0.2, 0.8]],
            ],
            vec![],
        )
        .unwrap()
    }

    fn complete_seq(values: &[f64]) -> ObservationSequence {
        let t = values.len();
        ObservationSequence::new(
            slot_grid(default_start(), t, 10),
            Array2::from_shape_fn((t, 1), |(r, _)| values[r]),
            Array2::from_elem((t, 1), true),
            Array2::zeros((t, 0)),
            Array2::from_elem((t, 0), false),
            vec!["c0".into()],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn initialize_single_state_uses_global_mean() {
        let seq = complete_seq(&[1.0, 2.0, 3.0, 6.0]);
        let config = FitConfig::default();
        let params = initialize(&[seq], 1, &config, &Constraints::none()).unwrap();
        assert!((params.gaussians[0].mean[0] - 3.0).abs() < 1e-12);
        assert_eq!(params.trans, array![[1.0]]);
    }

    #[test]
    fn initialize_separated_clusters() {
        let mut values = Vec::new();
        let mut rng_vals = [0.13, -0.22, 0.31, -0.05, 0.18, -0.11, 0.02, 0.27];
        for k in 0..40 {
            let center = if k % 2 == 0 { -5.0 } else { 5.0 };
            values.push(center + rng_vals[k % rng_vals.len()]);
            rng_vals[k % rng_vals.len()] *= -0.7;
        }
        let seq = complete_seq(&values);
        let config = FitConfig::default();
        let params = initialize(&[seq], 2, &config, &Constraints::none()).unwrap();
        let mut means: Vec<f64> = params.gaussians.iter().map(|g| g.mean[0]).collect();
        means.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((means[0] + 5.0).abs() < 0.1, "low centroid {}", means[0]);
        assert!((means[1] - 5.0).abs() < 0.1, "high centroid {}", means[1]);
    }

    #[test]
    fn initialize_clamp_renormalizes() {
        let seq = sample_sequence(&two_state_model(), 30, &MissingRates::none(1, 1), 5)
            .unwrap()
            .1;
        let constraints = Constraints {
            fixed_entries: vec![ClampEntry {
                state: 1,
                feature: 0,
                category: 1,
                prob: 0.0,
            }],
            sleep_states: BTreeSet::new(),
        };
        let params = initialize(&[seq], 2, &FitConfig::default(), &constraints).unwrap();
        assert_eq!(params.discretes[1][0], array![1.0, 0.0]);
        assert_eq!(params.discretes[0][0], array![0.5, 0.5]);
    }

    #[test]
    fn initialize_rejects_too_few_rows() {
        let seq = complete_seq(&[1.0, 2.0]);
        let err = initialize(&[seq], 3, &FitConfig::default(), &Constraints::none()).unwrap_err();
        assert!(matches!(err, Error::NotEnoughRows { requested: 3, usable: 2 }));
    }

    #[test]
    fn m_step_complete_data_single_state() {
        let seq = complete_seq(&[1.0, 2.0, 3.0]);
        let model = ModelParameters::new(
            array![1.0],
            array![[1.0]],
            vec![GaussianParams {
                mean: array![0.0],
                cov: array![[1.0]],
            }],
            vec![vec![]],
            vec![],
        )
        .unwrap();
        let (posts, _) = e_step(&model, std::slice::from_ref(&seq)).unwrap();
        let updated = m_step(
            std::slice::from_ref(&seq),
            &posts,
            &model,
            &Constraints::none(),
            &FitConfig::default(),
        )
        .unwrap();
        assert!((updated.gaussians[0].mean[0] - 2.0).abs() < 1e-12);
        // Population covariance of [1,2,3] is 2/3, plus nothing (floor met).
        assert!((updated.gaussians[0].cov[[0, 0]] - 2.0 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn m_step_fully_missing_row_matches_explicit_substitution() {
        // One continuous feature, single state: the update with a fully
        // missing row must equal the complete-data update after substituting
        // that row with the state mean.
        let t = 5;
        let observed = [1.0, 2.0, f64::NAN, 4.0, 5.0];
        let mask = Array2::from_shape_fn((t, 1), |(r, _)| r != 2);
        let seq = ObservationSequence::new(
            slot_grid(default_start(), t, 10),
            Array2::from_shape_fn((t, 1), |(r, _)| observed[r]),
            mask,
            Array2::zeros((t, 0)),
            Array2::from_elem((t, 0), false),
            vec!["c0".into()],
            vec![],
        )
        .unwrap();
        let current = ModelParameters {
            pi: array![1.0],
            trans: array![[1.0]],
            gaussians: vec![GaussianParams {
                mean: array![10.0],
                cov: array![[2.0]],
            }],
            discretes: vec![vec![]],
            clamp: vec![],
        };
        let (posts, _) = e_step(&current, std::slice::from_ref(&seq)).unwrap();
        let updated = m_step(
            std::slice::from_ref(&seq),
            &posts,
            &current,
            &Constraints::none(),
            &FitConfig::default(),
        )
        .unwrap();
        // Explicit substitution path: replace the missing cell by the state
        // mean and take the plain average.
        let substituted = [1.0, 2.0, 10.0, 4.0, 5.0];
        let mean_oracle: f64 = substituted.iter().sum::<f64>() / t as f64;
        assert!((updated.gaussians[0].mean[0] - mean_oracle).abs() < 1e-10);
    }

    #[test]
    fn m_step_detects_state_collapse() {
        let seq = complete_seq(&[1.0, 2.0]);
        let model = ModelParameters::new(
            array![0.5, 0.5],
            array![[0.9, 0.1], [0.1, 0.9]],
            vec![
                GaussianParams { mean: array![-3.0], cov: array![[1.0]] },
                GaussianParams { mean: array![3.0], cov: array![[1.0]] },
            ],
            vec![vec![], vec![]],
            vec![],
        )
        .unwrap();
        let (mut posts, _) = e_step(&model, std::slice::from_ref(&seq)).unwrap();
        posts[0].gamma.column_mut(1).fill(0.0);
        posts[0].gamma.column_mut(0).fill(1.0);
        for v in posts[0].xi.iter_mut() {
            *v = 0.0;
        }
        posts[0].xi[[0, 0, 0]] = 1.0;
        let err = m_step(
            std::slice::from_ref(&seq),
            &posts,
            &model,
            &Constraints::none(),
            &FitConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::StateCollapse { state: 1, .. }));
    }

    #[test]
    fn clamped_entry_stays_exactly_zero() {
        let truth = two_state_model();
        let (_, seq) = sample_sequence(&truth, 200, &MissingRates::none(1, 1), 11).unwrap();
        let constraints = Constraints {
            fixed_entries: vec![ClampEntry {
                state: 0,
                feature: 0,
                category: 1,
                prob: 0.0,
            }],
            sleep_states: BTreeSet::new(),
        };
        let config = FitConfig {
            restarts: 2,
            max_iterations: 20,
            ..FitConfig::default()
        };
        let result = fit(std::slice::from_ref(&seq), 2, &constraints, &config).unwrap();
        assert_eq!(result.params.discretes[0][0][1], 0.0);
        let report = result.params.validate();
        assert!(report.is_ok(), "{report}");
    }

    #[test]
    fn fit_trace_is_monotone() {
        let truth = two_state_model();
        let (_, seq) = sample_sequence(&truth, 150, &MissingRates::uniform(1, 1, 0.2), 3).unwrap();
        let config = FitConfig {
            restarts: 1,
            max_iterations: 30,
            ..FitConfig::default()
        };
        let result = fit(std::slice::from_ref(&seq), 2, &Constraints::none(), &config).unwrap();
        for pair in result.trace.windows(2) {
            assert!(
                pair[1] >= pair[0] - 1e-8,
                "trace decreased: {} -> {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn impute_observed_cells_unchanged() {
        let truth = two_state_model();
        let (_, seq) = sample_sequence(&truth, 60, &MissingRates::uniform(1, 1, 0.4), 9).unwrap();
        let post = forward_backward(&truth, &seq).unwrap();
        let completed = impute_missing(&truth, &seq, &post).unwrap();
        for t in 0..seq.num_slots() {
            if seq.continuous_mask()[[t, 0]] {
                assert_eq!(completed[[t, 0]], seq.continuous()[[t, 0]]);
            } else {
                assert!(completed[[t, 0]].is_finite());
            }
        }
    }

    #[test]
    fn impute_one_hot_gamma_gives_state_mean() {
        let truth = two_state_model();
        let (_, seq) = sample_sequence(&truth, 4, &MissingRates::none(1, 1), 2).unwrap();
        // Rebuild with the continuous cell at t=1 masked out.
        let mut mask = seq.continuous_mask().clone();
        mask[[1, 0]] = false;
        let seq = ObservationSequence::new(
            seq.timestamps().to_vec(),
            seq.continuous().clone(),
            mask,
            seq.discrete().clone(),
            seq.discrete_mask().clone(),
            seq.feature_names().to_vec(),
            seq.cardinalities().to_vec(),
        )
        .unwrap();
        let mut post = forward_backward(&truth, &seq).unwrap();
        post.gamma.row_mut(1).assign(&array![0.0, 1.0]);
        let completed = impute_missing(&truth, &seq, &post).unwrap();
        assert!((completed[[1, 0]] - 3.0).abs() < 1e-12);
    }
}
