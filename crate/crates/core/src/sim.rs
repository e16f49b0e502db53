//! Exact sampling from the generative model and state-path binarization.

use chrono::{DateTime, TimeZone, Utc};
use ndarray::{Array1, Array2};
use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{slot_grid, LabelSource, ObservationSequence, SleepLabels};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{Constraints, ModelParameters, COVARIANCE_FLOOR};

/// Per-feature probabilities that a sampled cell is masked out.
#[derive(Debug, Clone, PartialEq)]
pub struct MissingRates {
    pub continuous: Vec<f64>,
    pub discrete: Vec<f64>,
}

impl MissingRates {
    pub fn none(num_continuous: usize, num_discrete: usize) -> Self {
        MissingRates {
            continuous: vec![0.0; num_continuous],
            discrete: vec![0.0; num_discrete],
        }
    }

    pub fn uniform(num_continuous: usize, num_discrete: usize, rate: f64) -> Self {
        MissingRates {
            continuous: vec![rate; num_continuous],
            discrete: vec![rate; num_discrete],
        }
    }

    fn check(&self, num_continuous: usize, num_discrete: usize) -> Result<()> {
        if self.continuous.len() != num_continuous || self.discrete.len() != num_discrete {
            return Err(Error::Shape(format!(
                "missing rates cover {}+{} features, model has {num_continuous}+{num_discrete}",
                self.continuous.len(),
                self.discrete.len()
            )));
        }
        for &r in self.continuous.iter().chain(self.discrete.iter()) {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidArgument(format!(
                    "missing rate {r} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Default first slot for synthesized sequences.
pub fn default_start() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap()
}

/// Ancestral sampling of one sequence: states from the chain, then per-state
/// Gaussian rows and categorical cells, then independent per-feature masking.
/// Deterministic for a fixed seed.
pub fn sample_sequence(
    params: &ModelParameters,
    len: usize,
    rates: &MissingRates,
    seed: u64,
) -> Result<(Vec<usize>, ObservationSequence)> {
    sample_sequence_from(params, len, rates, seed, default_start(), None)
}

/// As [`sample_sequence`], with an explicit first-slot timestamp and optional
/// feature names (defaults are `c0..` and `d0..`).
pub fn sample_sequence_from(
    params: &ModelParameters,
    len: usize,
    rates: &MissingRates,
    seed: u64,
    start: DateTime<Utc>,
    feature_names: Option<Vec<String>>,
) -> Result<(Vec<usize>, ObservationSequence)> {
    let params = params.clone().validated()?;
    if len == 0 {
        return Err(Error::InvalidArgument("sequence length must be positive".into()));
    }
    let states = params.num_states();
    let g = params.num_continuous();
    let j = params.num_discrete();
    rates.check(g, j)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let pi_dist = weighted(params.pi.iter().copied())?;
    let trans_dists: Vec<WeightedIndex<f64>> = (0..states)
        .map(|i| weighted(params.trans.row(i).iter().copied()))
        .collect::<Result<_>>()?;
    let discrete_dists: Vec<Vec<WeightedIndex<f64>>> = (0..states)
        .map(|i| {
            (0..j)
                .map(|jj| weighted(params.discretes[i][jj].iter().copied()))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;
    let chol_factors: Vec<Array2<f64>> = (0..states)
        .map(|i| {
            linalg::cholesky_with_floor(&params.gaussians[i].cov.view(), COVARIANCE_FLOOR)
                .map(|(f, _)| f.lower())
        })
        .collect::<Result<_>>()?;

    let mut path = Vec::with_capacity(len);
    let mut state = pi_dist.sample(&mut rng);
    path.push(state);
    for _ in 1..len {
        state = trans_dists[state].sample(&mut rng);
        path.push(state);
    }

    let mut continuous = Array2::zeros((len, g));
    for (t, &s) in path.iter().enumerate() {
        let z: Array1<f64> = Array1::from_shape_fn(g, |_| rng.sample(StandardNormal));
        let row = &params.gaussians[s].mean + &chol_factors[s].dot(&z);
        continuous.row_mut(t).assign(&row);
    }

    let mut discrete = Array2::zeros((len, j));
    for (t, &s) in path.iter().enumerate() {
        for jj in 0..j {
            discrete[[t, jj]] = discrete_dists[s][jj].sample(&mut rng);
        }
    }

    let mut continuous_mask = Array2::from_elem((len, g), true);
    for col in 0..g {
        let rate = rates.continuous[col];
        for t in 0..len {
            if rng.random::<f64>() < rate {
                continuous_mask[[t, col]] = false;
            }
        }
    }
    let mut discrete_mask = Array2::from_elem((len, j), true);
    for col in 0..j {
        let rate = rates.discrete[col];
        for t in 0..len {
            if rng.random::<f64>() < rate {
                discrete_mask[[t, col]] = false;
            }
        }
    }

    let names = feature_names.unwrap_or_else(|| {
        (0..g)
            .map(|c| format!("c{c}"))
            .chain((0..j).map(|d| format!("d{d}")))
            .collect()
    });
    let seq = ObservationSequence::new(
        slot_grid(start, len, 10),
        continuous,
        continuous_mask,
        discrete,
        discrete_mask,
        names,
        params.cardinalities(),
    )?;
    Ok((path, seq))
}

fn weighted(probs: impl Iterator<Item = f64>) -> Result<WeightedIndex<f64>> {
    WeightedIndex::new(probs)
        .map_err(|e| Error::InvalidArgument(format!("invalid probability vector: {e}")))
}

/// Map a state path to binary sleep labels: a slot is asleep iff its state is
/// in `constraints.sleep_states`.
pub fn binarize_states(
    path: &[usize],
    timestamps: &[DateTime<Utc>],
    constraints: &Constraints,
) -> Result<SleepLabels> {
    if constraints.sleep_states.is_empty() {
        return Err(Error::EmptySleepStates);
    }
    if path.len() != timestamps.len() {
        return Err(Error::Shape(format!(
            "{} states but {} timestamps",
            path.len(),
            timestamps.len()
        )));
    }
    let labels = path
        .iter()
        .map(|s| u8::from(constraints.sleep_states.contains(s)))
        .collect();
    SleepLabels::new(timestamps.to_vec(), labels, LabelSource::Model)
}
