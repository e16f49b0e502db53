//! Lloyd's k-means shared by EM initialization and the clustering baselines.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// How initial centroids are chosen.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Seeding {
    /// Greedy variant of the D² rule: start from the point nearest the grand
    /// mean, then repeatedly take the point farthest from the chosen set.
    /// Deterministic and invariant to row order.
    FarthestFirst,
    /// Classic randomized D² seeding driven by the given seed.
    PlusPlus(u64),
}

#[derive(Debug, Clone)]
pub(crate) struct KmeansFit {
    pub centroids: Array2<f64>,
    pub assignments: Vec<usize>,
}

fn sq_dist(a: &ArrayView1<f64>, b: &ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn lex_less(a: &ArrayView1<f64>, b: &ArrayView1<f64>) -> bool {
    for (x, y) in a.iter().zip(b.iter()) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    false
}

fn seed_farthest_first(points: &ArrayView2<f64>, k: usize) -> Vec<usize> {
    let n = points.nrows();
    let grand_mean = points.mean_axis(ndarray::Axis(0)).unwrap();
    let mut chosen = Vec::with_capacity(k);
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for i in 0..n {
        let d = sq_dist(&points.row(i), &grand_mean.view());
        if d < best_d || (d == best_d && lex_less(&points.row(i), &points.row(best))) {
            best = i;
            best_d = d;
        }
    }
    chosen.push(best);
    let mut min_dist: Vec<f64> = (0..n)
        .map(|i| sq_dist(&points.row(i), &points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let mut next = 0;
        let mut next_d = f64::NEG_INFINITY;
        for i in 0..n {
            if min_dist[i] > next_d
                || (min_dist[i] == next_d && lex_less(&points.row(i), &points.row(next)))
            {
                next = i;
                next_d = min_dist[i];
            }
        }
        chosen.push(next);
        for i in 0..n {
            min_dist[i] = min_dist[i].min(sq_dist(&points.row(i), &points.row(next)));
        }
    }
    chosen
}

fn seed_plus_plus(points: &ArrayView2<f64>, k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = points.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.random_range(0..n)];
    let mut min_dist: Vec<f64> = (0..n)
        .map(|i| sq_dist(&points.row(i), &points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = min_dist.iter().sum();
        let next = if total > 0.0 {
            let dist = WeightedIndex::new(min_dist.iter().copied())
                .map_err(|e| Error::DegenerateClustering(e.to_string()))?;
            dist.sample(&mut rng)
        } else {
            // All remaining points coincide with a centroid.
            rng.random_range(0..n)
        };
        chosen.push(next);
        for i in 0..n {
            min_dist[i] = min_dist[i].min(sq_dist(&points.row(i), &points.row(next)));
        }
    }
    Ok(chosen)
}

/// Cluster `points` (rows) into `k` groups. Assignment ties break toward the
/// lower centroid index; empty clusters keep their previous centroid.
pub(crate) fn kmeans(
    points: &ArrayView2<f64>,
    k: usize,
    seeding: Seeding,
    max_iter: usize,
    tol: f64,
) -> Result<KmeansFit> {
    let n = points.nrows();
    let dim = points.ncols();
    if k == 0 || n < k {
        return Err(Error::DegenerateClustering(format!(
            "{n} points cannot support {k} clusters"
        )));
    }
    let seeds = match seeding {
        Seeding::FarthestFirst => seed_farthest_first(points, k),
        Seeding::PlusPlus(seed) => seed_plus_plus(points, k, seed)?,
    };
    let mut centroids = Array2::zeros((k, dim));
    for (c, &idx) in seeds.iter().enumerate() {
        centroids.row_mut(c).assign(&points.row(idx));
    }

    let mut assignments = vec![0usize; n];
    for _ in 0..max_iter {
        for (i, slot) in assignments.iter_mut().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d = sq_dist(&points.row(i), &centroids.row(c));
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            *slot = best;
        }
        let mut next = Array2::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            let mut row = next.row_mut(c);
            row += &points.row(i);
            counts[c] += 1;
        }
        let mut movement = 0.0f64;
        for c in 0..k {
            if counts[c] == 0 {
                next.row_mut(c).assign(&centroids.row(c));
            } else {
                let scaled = next.row(c).mapv(|v| v / counts[c] as f64);
                next.row_mut(c).assign(&scaled);
            }
            movement = movement.max(sq_dist(&next.row(c), &centroids.row(c)).sqrt());
        }
        centroids = next;
        if movement < tol {
            break;
        }
    }
    // Final assignment against the converged centroids.
    for (i, slot) in assignments.iter_mut().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            let d = sq_dist(&points.row(i), &centroids.row(c));
            if d < best_d {
                best = c;
                best_d = d;
            }
        }
        *slot = best;
    }
    Ok(KmeansFit {
        centroids,
        assignments,
    })
}

/// Per-cluster mean of an arbitrary column, used to give clusters semantics.
pub(crate) fn cluster_column_means(
    points: &ArrayView2<f64>,
    assignments: &[usize],
    k: usize,
    column: usize,
) -> Vec<f64> {
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (i, &c) in assignments.iter().enumerate() {
        sums[c] += points[[i, column]];
        counts[c] += 1;
    }
    sums.iter()
        .zip(counts.iter())
        .map(|(&s, &n)| if n == 0 { f64::INFINITY } else { s / n as f64 })
        .collect()
}

pub(crate) fn centroid_of(points: &ArrayView2<f64>, rows: &[usize]) -> Array1<f64> {
    let mut mean = Array1::zeros(points.ncols());
    for &r in rows {
        mean += &points.row(r);
    }
    mean / rows.len().max(1) as f64
}
