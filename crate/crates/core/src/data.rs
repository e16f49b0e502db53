//! Observation sequences and sleep labels.
//!
//! A sequence is one contiguous run of time slots for a single patient,
//! carrying continuous features (e.g. actigraphy, light) and discrete
//! features (e.g. binarized steps, app usage) side by side. Missing cells
//! are tracked by explicit masks; the stored cell values of masked entries
//! are sentinels and must never be read.

use chrono::{DateTime, Utc};
use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stored in masked-out continuous cells. The mask is authoritative; NaN can
/// appear legitimately nowhere else.
pub const CONTINUOUS_SENTINEL: f64 = f64::NAN;

/// Stored in masked-out discrete cells.
pub const DISCRETE_SENTINEL: usize = usize::MAX;

/// One run of time-aligned heterogeneous observations on a fixed slot grid.
#[derive(Debug, Clone)]
pub struct ObservationSequence {
    timestamps: Vec<DateTime<Utc>>,
    continuous: Array2<f64>,
    continuous_mask: Array2<bool>,
    discrete: Array2<usize>,
    discrete_mask: Array2<bool>,
    feature_names: Vec<String>,
    cardinalities: Vec<usize>,
}

/// Masked cells are never read, so equality ignores their stored values
/// (NaN sentinels would otherwise poison the comparison).
impl PartialEq for ObservationSequence {
    fn eq(&self, other: &Self) -> bool {
        if self.timestamps != other.timestamps
            || self.continuous_mask != other.continuous_mask
            || self.discrete_mask != other.discrete_mask
            || self.feature_names != other.feature_names
            || self.cardinalities != other.cardinalities
        {
            return false;
        }
        let continuous_equal = self
            .continuous_mask
            .iter()
            .zip(self.continuous.iter().zip(other.continuous.iter()))
            .all(|(&observed, (&a, &b))| !observed || a == b);
        let discrete_equal = self
            .discrete_mask
            .iter()
            .zip(self.discrete.iter().zip(other.discrete.iter()))
            .all(|(&observed, (&a, &b))| !observed || a == b);
        continuous_equal && discrete_equal
    }
}

impl ObservationSequence {
    /// Build a sequence, checking the shared invariants and normalizing
    /// masked cells to sentinels.
    pub fn new(
        timestamps: Vec<DateTime<Utc>>,
        mut continuous: Array2<f64>,
        continuous_mask: Array2<bool>,
        mut discrete: Array2<usize>,
        discrete_mask: Array2<bool>,
        feature_names: Vec<String>,
        cardinalities: Vec<usize>,
    ) -> Result<Self> {
        let t = timestamps.len();
        if t == 0 {
            return Err(Error::Shape("sequence must contain at least one slot".into()));
        }
        for pair in timestamps.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::Shape(format!(
                    "timestamps must be strictly increasing ({} then {})",
                    pair[0], pair[1]
                )));
            }
        }
        let g = continuous.ncols();
        let j = discrete.ncols();
        if continuous.nrows() != t
            || continuous_mask.nrows() != t
            || discrete.nrows() != t
            || discrete_mask.nrows() != t
        {
            return Err(Error::Shape(format!(
                "all matrices must have {t} rows (continuous {}, continuous_mask {}, discrete {}, discrete_mask {})",
                continuous.nrows(),
                continuous_mask.nrows(),
                discrete.nrows(),
                discrete_mask.nrows()
            )));
        }
        if continuous_mask.ncols() != g || discrete_mask.ncols() != j {
            return Err(Error::Shape("masks must match their value matrices".into()));
        }
        if feature_names.len() != g + j {
            return Err(Error::Shape(format!(
                "expected {} feature names, got {}",
                g + j,
                feature_names.len()
            )));
        }
        if cardinalities.len() != j {
            return Err(Error::Shape(format!(
                "expected {j} cardinalities, got {}",
                cardinalities.len()
            )));
        }
        for (jj, &c) in cardinalities.iter().enumerate() {
            if c < 2 {
                return Err(Error::Shape(format!(
                    "discrete feature {jj} has cardinality {c}; need at least 2"
                )));
            }
        }
        for ((row, col), &observed) in discrete_mask.indexed_iter() {
            if observed {
                let v = discrete[[row, col]];
                if v >= cardinalities[col] {
                    return Err(Error::Shape(format!(
                        "discrete value {v} at slot {row}, feature {col} exceeds cardinality {}",
                        cardinalities[col]
                    )));
                }
            }
        }
        // Masked cells carry sentinels no matter what the caller passed in.
        for ((row, col), &observed) in continuous_mask.indexed_iter() {
            if observed {
                if !continuous[[row, col]].is_finite() {
                    return Err(Error::Shape(format!(
                        "observed continuous cell at slot {row}, feature {col} is not finite"
                    )));
                }
            } else {
                continuous[[row, col]] = CONTINUOUS_SENTINEL;
            }
        }
        for ((row, col), &observed) in discrete_mask.indexed_iter() {
            if !observed {
                discrete[[row, col]] = DISCRETE_SENTINEL;
            }
        }
        Ok(ObservationSequence {
            timestamps,
            continuous,
            continuous_mask,
            discrete,
            discrete_mask,
            feature_names,
            cardinalities,
        })
    }

    pub fn num_slots(&self) -> usize {
        self.timestamps.len()
    }

    pub fn num_continuous(&self) -> usize {
        self.continuous.ncols()
    }

    pub fn num_discrete(&self) -> usize {
        self.discrete.ncols()
    }

    pub fn timestamps(&self) -> &[DateTime<Utc>] {
        &self.timestamps
    }

    pub fn continuous(&self) -> &Array2<f64> {
        &self.continuous
    }

    pub fn continuous_mask(&self) -> &Array2<bool> {
        &self.continuous_mask
    }

    pub fn discrete(&self) -> &Array2<usize> {
        &self.discrete
    }

    pub fn discrete_mask(&self) -> &Array2<bool> {
        &self.discrete_mask
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn continuous_feature_names(&self) -> &[String] {
        &self.feature_names[..self.num_continuous()]
    }

    pub fn discrete_feature_names(&self) -> &[String] {
        &self.feature_names[self.num_continuous()..]
    }

    pub fn cardinalities(&self) -> &[usize] {
        &self.cardinalities
    }

    pub fn continuous_row(&self, t: usize) -> ArrayView1<'_, f64> {
        self.continuous.row(t)
    }

    /// Observed continuous feature indices at slot `t`, ascending.
    pub fn observed_continuous(&self, t: usize) -> Vec<usize> {
        (0..self.num_continuous())
            .filter(|&col| self.continuous_mask[[t, col]])
            .collect()
    }

    /// Bitmask of observed continuous features at slot `t` (bit `col` set when
    /// observed). Used to key per-pattern caches.
    pub fn continuous_pattern(&self, t: usize) -> u64 {
        debug_assert!(self.num_continuous() <= 64);
        let mut mask = 0u64;
        for col in 0..self.num_continuous() {
            if self.continuous_mask[[t, col]] {
                mask |= 1 << col;
            }
        }
        mask
    }

    /// Count of observed scalar cells over both feature blocks.
    pub fn observed_cells(&self) -> usize {
        self.continuous_mask.iter().filter(|&&m| m).count()
            + self.discrete_mask.iter().filter(|&&m| m).count()
    }
}

/// Where a label stream came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// Reported by a reference wearable device.
    Wearable,
    /// Produced by a model's decoded state path.
    Model,
}

/// Per-slot binary sleep labels: 1 = asleep, 0 = awake.
#[derive(Debug, Clone, PartialEq)]
pub struct SleepLabels {
    pub timestamps: Vec<DateTime<Utc>>,
    pub labels: Vec<u8>,
    pub source: LabelSource,
}

impl SleepLabels {
    pub fn new(
        timestamps: Vec<DateTime<Utc>>,
        labels: Vec<u8>,
        source: LabelSource,
    ) -> Result<Self> {
        if timestamps.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} timestamps but {} labels",
                timestamps.len(),
                labels.len()
            )));
        }
        for pair in timestamps.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::Shape("label timestamps must be strictly increasing".into()));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&v| v > 1) {
            return Err(Error::Shape(format!("labels must be 0 or 1, got {bad}")));
        }
        Ok(SleepLabels {
            timestamps,
            labels,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Fraction of slots labeled asleep.
    pub fn asleep_fraction(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        self.labels.iter().map(|&v| v as f64).sum::<f64>() / self.labels.len() as f64
    }
}

/// Evenly spaced slot timestamps starting at `start`.
pub fn slot_grid(start: DateTime<Utc>, len: usize, slot_minutes: u32) -> Vec<DateTime<Utc>> {
    (0..len)
        .map(|i| start + chrono::Duration::minutes(i as i64 * slot_minutes as i64))
        .collect()
}
