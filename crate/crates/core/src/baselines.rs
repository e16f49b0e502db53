//! Comparison stack: imputation methods, pooled K-means and GMM sleep
//! clustering, dummy classifiers, and the evaluation metrics.
//!
//! Both clustering baselines run on imputed, standardized per-slot feature
//! vectors pooled across all training sequences, and the cluster with the
//! lower mean activity (the designated activity feature, unstandardized) is
//! read out as asleep.

use chrono::{DateTime, Utc};
use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cluster::{self, Seeding};
use crate::data::{LabelSource, ObservationSequence, SleepLabels};
use crate::error::{Error, Result};
use crate::linalg::{self, log_sum_exp, SpdFactor};
use crate::model::COVARIANCE_FLOOR;

const CLUSTER_MAX_ITER: usize = 300;
const CLUSTER_TOL: f64 = 1e-6;

/// Missing-value completion strategy for the baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Imputer {
    /// Continuous: global per-feature mean. Discrete: missing becomes 0.
    MeanAndZero,
    /// Continuous: global per-feature mean. Discrete: per-sequence mode,
    /// ties toward the lower category.
    MeanAndMode,
}

impl Imputer {
    pub fn apply(self, seqs: &[ObservationSequence]) -> Result<Vec<ObservationSequence>> {
        match self {
            Imputer::MeanAndZero => impute_method1(seqs),
            Imputer::MeanAndMode => impute_method2(seqs),
        }
    }
}

fn continuous_means(seqs: &[ObservationSequence]) -> Result<Array1<f64>> {
    let g = seqs[0].num_continuous();
    let mut sums = Array1::<f64>::zeros(g);
    let mut counts = vec![0usize; g];
    for seq in seqs {
        for ((row, col), &observed) in seq.continuous_mask().indexed_iter() {
            if observed {
                sums[col] += seq.continuous()[[row, col]];
                counts[col] += 1;
            }
        }
    }
    for col in 0..g {
        if counts[col] == 0 {
            return Err(Error::FullyMissingFeature {
                name: seqs[0].feature_names()[col].clone(),
            });
        }
        sums[col] /= counts[col] as f64;
    }
    Ok(sums)
}

fn check_discrete_coverage(seqs: &[ObservationSequence]) -> Result<()> {
    let j = seqs[0].num_discrete();
    for feature in 0..j {
        let any = seqs
            .iter()
            .any(|s| (0..s.num_slots()).any(|t| s.discrete_mask()[[t, feature]]));
        if !any {
            return Err(Error::FullyMissingFeature {
                name: seqs[0].discrete_feature_names()[feature].clone(),
            });
        }
    }
    Ok(())
}

fn rebuild_complete(
    seq: &ObservationSequence,
    continuous: Array2<f64>,
    discrete: Array2<usize>,
) -> Result<ObservationSequence> {
    ObservationSequence::new(
        seq.timestamps().to_vec(),
        continuous,
        Array2::from_elem((seq.num_slots(), seq.num_continuous()), true),
        discrete,
        Array2::from_elem((seq.num_slots(), seq.num_discrete()), true),
        seq.feature_names().to_vec(),
        seq.cardinalities().to_vec(),
    )
}

/// Imputation method 1: global per-feature mean for continuous features,
/// zero for missing discrete cells. Masks become all-true.
pub fn impute_method1(seqs: &[ObservationSequence]) -> Result<Vec<ObservationSequence>> {
    if seqs.is_empty() {
        return Ok(Vec::new());
    }
    let means = continuous_means(seqs)?;
    check_discrete_coverage(seqs)?;
    seqs.iter()
        .map(|seq| {
            let continuous = Array2::from_shape_fn(
                (seq.num_slots(), seq.num_continuous()),
                |(t, col)| {
                    if seq.continuous_mask()[[t, col]] {
                        seq.continuous()[[t, col]]
                    } else {
                        means[col]
                    }
                },
            );
            let discrete = Array2::from_shape_fn(
                (seq.num_slots(), seq.num_discrete()),
                |(t, col)| {
                    if seq.discrete_mask()[[t, col]] {
                        seq.discrete()[[t, col]]
                    } else {
                        0
                    }
                },
            );
            rebuild_complete(seq, continuous, discrete)
        })
        .collect()
}

/// Imputation method 2: continuous cells as in method 1; discrete cells take
/// the per-sequence mode (ties toward the lower category, global mode when a
/// sequence has no observation of the feature).
pub fn impute_method2(seqs: &[ObservationSequence]) -> Result<Vec<ObservationSequence>> {
    if seqs.is_empty() {
        return Ok(Vec::new());
    }
    let means = continuous_means(seqs)?;
    check_discrete_coverage(seqs)?;
    let j = seqs[0].num_discrete();
    let cards = seqs[0].cardinalities();

    let mode_of = |counts: &[usize]| -> Option<usize> {
        let best = *counts.iter().max()?;
        if best == 0 {
            return None;
        }
        counts.iter().position(|&c| c == best)
    };
    let global_modes: Vec<usize> = (0..j)
        .map(|feature| {
            let mut counts = vec![0usize; cards[feature]];
            for seq in seqs {
                for t in 0..seq.num_slots() {
                    if seq.discrete_mask()[[t, feature]] {
                        counts[seq.discrete()[[t, feature]]] += 1;
                    }
                }
            }
            mode_of(&counts).unwrap_or(0)
        })
        .collect();

    seqs.iter()
        .map(|seq| {
            let continuous = Array2::from_shape_fn(
                (seq.num_slots(), seq.num_continuous()),
                |(t, col)| {
                    if seq.continuous_mask()[[t, col]] {
                        seq.continuous()[[t, col]]
                    } else {
                        means[col]
                    }
                },
            );
            let seq_modes: Vec<usize> = (0..j)
                .map(|feature| {
                    let mut counts = vec![0usize; cards[feature]];
                    for t in 0..seq.num_slots() {
                        if seq.discrete_mask()[[t, feature]] {
                            counts[seq.discrete()[[t, feature]]] += 1;
                        }
                    }
                    mode_of(&counts).unwrap_or(global_modes[feature])
                })
                .collect();
            let discrete = Array2::from_shape_fn(
                (seq.num_slots(), seq.num_discrete()),
                |(t, col)| {
                    if seq.discrete_mask()[[t, col]] {
                        seq.discrete()[[t, col]]
                    } else {
                        seq_modes[col]
                    }
                },
            );
            rebuild_complete(seq, continuous, discrete)
        })
        .collect()
}

/// Per-feature affine standardization fitted on pooled training slots.
#[derive(Debug, Clone)]
struct Standardizer {
    mean: Array1<f64>,
    scale: Array1<f64>,
}

impl Standardizer {
    fn fit(points: &Array2<f64>) -> Standardizer {
        let n = points.nrows().max(1) as f64;
        let mean = points.sum_axis(ndarray::Axis(0)) / n;
        let mut scale = Array1::zeros(points.ncols());
        for col in 0..points.ncols() {
            let var: f64 = points
                .column(col)
                .iter()
                .map(|&v| (v - mean[col]) * (v - mean[col]))
                .sum::<f64>()
                / n;
            let sd = var.sqrt();
            // Constant features contribute nothing rather than dividing by 0.
            scale[col] = if sd > 0.0 { sd } else { 1.0 };
        }
        Standardizer { mean, scale }
    }

    fn transform(&self, points: &Array2<f64>) -> Array2<f64> {
        Array2::from_shape_fn(points.dim(), |(r, c)| {
            (points[[r, c]] - self.mean[c]) / self.scale[c]
        })
    }
}

/// Stack every slot of every (complete) sequence into one feature matrix,
/// discrete categories cast to reals.
fn pooled_points(seqs: &[ObservationSequence]) -> Array2<f64> {
    let g = seqs[0].num_continuous();
    let j = seqs[0].num_discrete();
    let total: usize = seqs.iter().map(|s| s.num_slots()).sum();
    let mut points = Array2::zeros((total, g + j));
    let mut row = 0;
    for seq in seqs {
        for t in 0..seq.num_slots() {
            for c in 0..g {
                points[[row, c]] = seq.continuous()[[t, c]];
            }
            for d in 0..j {
                points[[row, g + d]] = seq.discrete()[[t, d]] as f64;
            }
            row += 1;
        }
    }
    points
}

fn split_labels(
    seqs: &[ObservationSequence],
    flat: &[u8],
) -> Result<Vec<SleepLabels>> {
    let mut out = Vec::with_capacity(seqs.len());
    let mut offset = 0;
    for seq in seqs {
        let labels = flat[offset..offset + seq.num_slots()].to_vec();
        offset += seq.num_slots();
        out.push(SleepLabels::new(
            seq.timestamps().to_vec(),
            labels,
            LabelSource::Model,
        )?);
    }
    Ok(out)
}

/// Pooled 2-means sleep clustering fitted on imputed, standardized slots.
#[derive(Debug, Clone)]
pub struct KmeansSleep {
    standardizer: Standardizer,
    centroids: Array2<f64>,
    asleep_cluster: usize,
}

impl KmeansSleep {
    /// Fit on the given sequences. `activity_feature` is the continuous
    /// column whose low-mean cluster is read out as asleep. The seed is part
    /// of the determinism contract; seeding itself is the deterministic
    /// greedy D² rule, so it is also invariant to slot order.
    pub fn fit(
        seqs: &[ObservationSequence],
        imputer: Imputer,
        activity_feature: usize,
        _seed: u64,
    ) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::InvalidArgument("no sequences to cluster".into()));
        }
        if activity_feature >= seqs[0].num_continuous() {
            return Err(Error::InvalidArgument(format!(
                "activity feature {activity_feature} out of range"
            )));
        }
        let complete = imputer.apply(seqs)?;
        let raw = pooled_points(&complete);
        let standardizer = Standardizer::fit(&raw);
        let points = standardizer.transform(&raw);
        let fit = cluster::kmeans(
            &points.view(),
            2,
            Seeding::FarthestFirst,
            CLUSTER_MAX_ITER,
            CLUSTER_TOL,
        )?;
        let activity_means =
            cluster::cluster_column_means(&raw.view(), &fit.assignments, 2, activity_feature);
        if fit.assignments.iter().all(|&a| a == fit.assignments[0]) {
            return Err(Error::DegenerateClustering(
                "all slots fell into one cluster".into(),
            ));
        }
        let asleep_cluster = if activity_means[0] <= activity_means[1] { 0 } else { 1 };
        Ok(KmeansSleep {
            standardizer,
            centroids: fit.centroids,
            asleep_cluster,
        })
    }

    /// Label each slot of each sequence by its nearest centroid.
    pub fn predict(
        &self,
        seqs: &[ObservationSequence],
        imputer: Imputer,
    ) -> Result<Vec<SleepLabels>> {
        let complete = imputer.apply(seqs)?;
        let points = self.standardizer.transform(&pooled_points(&complete));
        let flat: Vec<u8> = (0..points.nrows())
            .map(|r| {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for c in 0..2 {
                    let d: f64 = points
                        .row(r)
                        .iter()
                        .zip(self.centroids.row(c).iter())
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                    if d < best_d {
                        best = c;
                        best_d = d;
                    }
                }
                u8::from(best == self.asleep_cluster)
            })
            .collect();
        split_labels(seqs, &flat)
    }
}

/// One-call variant: fit on the sequences and label the same sequences.
pub fn kmeans_sleep(
    seqs: &[ObservationSequence],
    imputer: Imputer,
    activity_feature: usize,
    seed: u64,
) -> Result<Vec<SleepLabels>> {
    KmeansSleep::fit(seqs, imputer, activity_feature, seed)?.predict(seqs, imputer)
}

/// Pooled two-component full-covariance Gaussian mixture, posterior-argmax
/// labels, asleep component chosen by the activity rule.
#[derive(Debug, Clone)]
pub struct GmmSleep {
    standardizer: Standardizer,
    weights: Array1<f64>,
    means: Array2<f64>,
    covs: Vec<Array2<f64>>,
    asleep_component: usize,
}

impl GmmSleep {
    pub fn fit(
        seqs: &[ObservationSequence],
        imputer: Imputer,
        activity_feature: usize,
        _seed: u64,
    ) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::InvalidArgument("no sequences to cluster".into()));
        }
        if activity_feature >= seqs[0].num_continuous() {
            return Err(Error::InvalidArgument(format!(
                "activity feature {activity_feature} out of range"
            )));
        }
        let complete = imputer.apply(seqs)?;
        let raw = pooled_points(&complete);
        let standardizer = Standardizer::fit(&raw);
        let points = standardizer.transform(&raw);
        let n = points.nrows();
        let dim = points.ncols();
        let k = 2;

        // Responsibilities start from the deterministic k-means split.
        let seed_fit = cluster::kmeans(
            &points.view(),
            k,
            Seeding::FarthestFirst,
            CLUSTER_MAX_ITER,
            CLUSTER_TOL,
        )?;
        let mut resp = Array2::zeros((n, k));
        for (r, &a) in seed_fit.assignments.iter().enumerate() {
            resp[[r, a]] = 1.0;
        }

        let mut weights = Array1::zeros(k);
        let mut means = Array2::zeros((k, dim));
        let mut covs = vec![Array2::zeros((dim, dim)); k];
        let mut prev_ll = f64::NEG_INFINITY;
        for iter in 0..CLUSTER_MAX_ITER {
            // M-step from current responsibilities.
            for c in 0..k {
                let w: f64 = resp.column(c).sum();
                if w < 1e-9 {
                    return Err(Error::DegenerateClustering(format!(
                        "mixture component {c} collapsed at iteration {iter}"
                    )));
                }
                weights[c] = w / n as f64;
                for d in 0..dim {
                    means[[c, d]] = (0..n).map(|r| resp[[r, c]] * points[[r, d]]).sum::<f64>() / w;
                }
                let mut cov = Array2::zeros((dim, dim));
                for r in 0..n {
                    let rc = resp[[r, c]];
                    if rc == 0.0 {
                        continue;
                    }
                    for a in 0..dim {
                        let da = points[[r, a]] - means[[c, a]];
                        for b in 0..dim {
                            let db = points[[r, b]] - means[[c, b]];
                            cov[[a, b]] += rc * da * db;
                        }
                    }
                }
                cov /= w;
                linalg::floor_spd(&mut cov, COVARIANCE_FLOOR);
                covs[c] = cov;
            }
            // E-step.
            let factors: Vec<SpdFactor> = covs
                .iter()
                .map(|c| SpdFactor::new(&c.view()).ok_or(Error::SingularCovariance))
                .collect::<Result<_>>()?;
            let log_norms: Vec<f64> = factors
                .iter()
                .map(|f| -0.5 * (dim as f64 * (2.0 * std::f64::consts::PI).ln() + f.log_det()))
                .collect();
            let mut ll = 0.0;
            for r in 0..n {
                let mut scores = [0.0f64; 2];
                for c in 0..k {
                    let centered = &points.row(r) - &means.row(c);
                    scores[c] = weights[c].ln() + log_norms[c]
                        - 0.5 * factors[c].inv_quadratic(&centered.view());
                }
                let norm = log_sum_exp(&scores);
                ll += norm;
                for c in 0..k {
                    resp[[r, c]] = (scores[c] - norm).exp();
                }
            }
            if (ll - prev_ll).abs() < CLUSTER_TOL * ll.abs().max(1.0) {
                break;
            }
            prev_ll = ll;
        }

        // Activity means on the raw scale decide which component is asleep.
        let hard: Vec<usize> = (0..n)
            .map(|r| if resp[[r, 0]] >= resp[[r, 1]] { 0 } else { 1 })
            .collect();
        if hard.iter().all(|&a| a == hard[0]) {
            return Err(Error::DegenerateClustering(
                "all slots assigned to one mixture component".into(),
            ));
        }
        let activity_means = cluster::cluster_column_means(&raw.view(), &hard, 2, activity_feature);
        let asleep_component = if activity_means[0] <= activity_means[1] { 0 } else { 1 };
        Ok(GmmSleep {
            standardizer,
            weights,
            means,
            covs,
            asleep_component,
        })
    }

    pub fn predict(
        &self,
        seqs: &[ObservationSequence],
        imputer: Imputer,
    ) -> Result<Vec<SleepLabels>> {
        let complete = imputer.apply(seqs)?;
        let points = self.standardizer.transform(&pooled_points(&complete));
        let dim = points.ncols();
        let factors: Vec<SpdFactor> = self
            .covs
            .iter()
            .map(|c| SpdFactor::new(&c.view()).ok_or(Error::SingularCovariance))
            .collect::<Result<_>>()?;
        let log_norms: Vec<f64> = factors
            .iter()
            .map(|f| -0.5 * (dim as f64 * (2.0 * std::f64::consts::PI).ln() + f.log_det()))
            .collect();
        let flat: Vec<u8> = (0..points.nrows())
            .map(|r| {
                let mut scores = [0.0f64; 2];
                for c in 0..2 {
                    let centered = &points.row(r) - &self.means.row(c);
                    scores[c] = self.weights[c].ln() + log_norms[c]
                        - 0.5 * factors[c].inv_quadratic(&centered.view());
                }
                let hard = if scores[0] >= scores[1] { 0 } else { 1 };
                u8::from(hard == self.asleep_component)
            })
            .collect();
        split_labels(seqs, &flat)
    }
}

/// One-call variant of [`GmmSleep`].
pub fn gmm_sleep(
    seqs: &[ObservationSequence],
    imputer: Imputer,
    activity_feature: usize,
    seed: u64,
) -> Result<Vec<SleepLabels>> {
    GmmSleep::fit(seqs, imputer, activity_feature, seed)?.predict(seqs, imputer)
}

/// Constant prediction of the majority class of the truth labels themselves
/// (a label-distribution probe). Ties go to awake.
pub fn dummy_most_frequent(truth: &[SleepLabels]) -> Result<Vec<SleepLabels>> {
    let total: usize = truth.iter().map(|l| l.len()).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("no truth labels".into()));
    }
    let asleep: usize = truth
        .iter()
        .flat_map(|l| l.labels.iter())
        .filter(|&&v| v == 1)
        .count();
    let majority = u8::from(asleep * 2 > total);
    truth
        .iter()
        .map(|l| {
            SleepLabels::new(
                l.timestamps.clone(),
                vec![majority; l.len()],
                LabelSource::Model,
            )
        })
        .collect()
}

/// Independent uniform coin flips over the given slots.
pub fn dummy_uniform(seed: u64, timestamps: &[DateTime<Utc>]) -> Result<SleepLabels> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = (0..timestamps.len()).map(|_| rng.random_range(0..=1u8)).collect();
    SleepLabels::new(timestamps.to_vec(), labels, LabelSource::Model)
}

/// Confusion counts with asleep as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Accuracy, specificity, and sensitivity over jointly labeled slots.
/// Undefined ratios (empty denominator) are NaN with the matching flag
/// cleared.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EvaluationMetrics {
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub specificity: f64,
    pub sensitivity: f64,
    pub specificity_defined: bool,
    pub sensitivity_defined: bool,
}

/// Compare predictions against truth on the slots present in both (joined by
/// timestamp); slots lacking truth are excluded.
pub fn evaluate(pred: &SleepLabels, truth: &SleepLabels) -> Result<EvaluationMetrics> {
    let mut counts = ConfusionCounts::default();
    let mut pi = 0;
    for (ti, ts) in truth.timestamps.iter().enumerate() {
        while pi < pred.timestamps.len() && pred.timestamps[pi] < *ts {
            pi += 1;
        }
        if pi < pred.timestamps.len() && pred.timestamps[pi] == *ts {
            match (pred.labels[pi], truth.labels[ti]) {
                (1, 1) => counts.tp += 1,
                (1, 0) => counts.fp += 1,
                (0, 0) => counts.tn += 1,
                (0, 1) => counts.fn_ += 1,
                _ => unreachable!("labels are validated to 0/1"),
            }
        }
    }
    metrics_from_counts(counts)
}

/// Metrics over a batch of aligned prediction/truth pairs, pooled.
pub fn evaluate_all(pred: &[SleepLabels], truth: &[SleepLabels]) -> Result<EvaluationMetrics> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} prediction streams for {} truth streams",
            pred.len(),
            truth.len()
        )));
    }
    let mut counts = ConfusionCounts::default();
    for (p, t) in pred.iter().zip(truth.iter()) {
        match evaluate(p, t) {
            Ok(m) => {
                counts.tp += m.counts.tp;
                counts.fp += m.counts.fp;
                counts.tn += m.counts.tn;
                counts.fn_ += m.counts.fn_;
            }
            Err(Error::NoJointSlots) => {}
            Err(e) => return Err(e),
        }
    }
    metrics_from_counts(counts)
}

fn metrics_from_counts(counts: ConfusionCounts) -> Result<EvaluationMetrics> {
    let total = counts.total();
    if total == 0 {
        return Err(Error::NoJointSlots);
    }
    let sens_den = counts.tp + counts.fn_;
    let spec_den = counts.tn + counts.fp;
    Ok(EvaluationMetrics {
        counts,
        accuracy: (counts.tp + counts.tn) as f64 / total as f64,
        sensitivity: if sens_den > 0 {
            counts.tp as f64 / sens_den as f64
        } else {
            f64::NAN
        },
        specificity: if spec_den > 0 {
            counts.tn as f64 / spec_den as f64
        } else {
            f64::NAN
        },
        sensitivity_defined: sens_den > 0,
        specificity_defined: spec_den > 0,
    })
}
