//! CSV ingestion: bucketing raw rows onto the slot grid, missing-slot
//! padding inside each file's observed span, and gap splitting.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, TimeZone, Utc};
use ndarray::Array2;

use crate::data::{LabelSource, ObservationSequence, SleepLabels};
use crate::error::{Error, Result};
use crate::pipeline::manifest::{DatasetManifest, FeatureKind, FeatureSpec};

/// Fully-missing runs longer than this many hours split a file into separate
/// sequences (sleep episodes cross midnight, so day boundaries do not).
pub const GAP_SPLIT_HOURS: i64 = 6;

fn parse_timestamp(raw: &str, path: &str, line: usize) -> Result<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(raw.trim())
        .map(|dt| dt.with_timezone(&Utc))
        .map_err(|e| Error::DataFormat {
            path: path.to_string(),
            line,
            msg: format!("unparseable timestamp `{raw}`: {e}"),
        })
}

fn slot_index(ts: DateTime<Utc>, slot_minutes: u32) -> i64 {
    ts.timestamp().div_euclid(slot_minutes as i64 * 60)
}

fn slot_start(index: i64, slot_minutes: u32) -> DateTime<Utc> {
    Utc.timestamp_opt(index * slot_minutes as i64 * 60, 0).unwrap()
}

/// Raw per-slot aggregation state for one feature.
#[derive(Debug, Clone)]
enum CellAccum {
    Continuous { sum: f64, count: usize },
    Binary { any_positive: bool, present: bool },
    Categorical { counts: Vec<usize> },
}

impl CellAccum {
    fn new(spec: &FeatureSpec) -> Self {
        match spec.kind {
            FeatureKind::Continuous => CellAccum::Continuous { sum: 0.0, count: 0 },
            FeatureKind::Binary => CellAccum::Binary {
                any_positive: false,
                present: false,
            },
            FeatureKind::Categorical => CellAccum::Categorical {
                counts: vec![0; spec.effective_cardinality()],
            },
        }
    }

    fn present(&self) -> bool {
        match self {
            CellAccum::Continuous { count, .. } => *count > 0,
            CellAccum::Binary { present, .. } => *present,
            CellAccum::Categorical { counts } => counts.iter().any(|&c| c > 0),
        }
    }
}

fn feed(
    accum: &mut CellAccum,
    raw: &str,
    spec: &FeatureSpec,
    path: &str,
    line: usize,
) -> Result<()> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(());
    }
    match accum {
        CellAccum::Continuous { sum, count } => {
            let v: f64 = raw.parse().map_err(|_| Error::DataFormat {
                path: path.to_string(),
                line,
                msg: format!("unparseable value `{raw}` for feature `{}`", spec.name),
            })?;
            if !v.is_finite() {
                return Err(Error::DataFormat {
                    path: path.to_string(),
                    line,
                    msg: format!("non-finite value for feature `{}`", spec.name),
                });
            }
            *sum += v;
            *count += 1;
        }
        CellAccum::Binary { any_positive, present } => {
            let v: f64 = raw.parse().map_err(|_| Error::DataFormat {
                path: path.to_string(),
                line,
                msg: format!("unparseable value `{raw}` for feature `{}`", spec.name),
            })?;
            *any_positive |= v > 0.0;
            *present = true;
        }
        CellAccum::Categorical { counts } => {
            let v: usize = raw.parse().map_err(|_| Error::DataFormat {
                path: path.to_string(),
                line,
                msg: format!("unparseable category `{raw}` for feature `{}`", spec.name),
            })?;
            if v >= counts.len() {
                return Err(Error::DataFormat {
                    path: path.to_string(),
                    line,
                    msg: format!(
                        "category {v} out of range for feature `{}` (cardinality {})",
                        spec.name,
                        counts.len()
                    ),
                });
            }
            counts[v] += 1;
        }
    }
    Ok(())
}

struct ParsedFile {
    /// slot index -> per-feature accumulators (manifest feature order).
    slots: BTreeMap<i64, Vec<CellAccum>>,
}

fn parse_file(path: &Path, manifest: &DatasetManifest) -> Result<ParsedFile> {
    let path_str = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::DataFormat {
            path: path_str.clone(),
            line: 0,
            msg: e.to_string(),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::DataFormat {
            path: path_str.clone(),
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let col_of = |name: &str| headers.iter().position(|h| h.trim() == name);
    let ts_col = col_of("timestamp").ok_or_else(|| Error::DataFormat {
        path: path_str.clone(),
        line: 1,
        msg: "missing `timestamp` column".into(),
    })?;
    // Every manifest feature must be present; extra columns are ignored.
    let feature_cols: Vec<usize> = manifest
        .features
        .iter()
        .map(|f| {
            col_of(&f.name).ok_or_else(|| Error::UnknownFeature {
                feature: f.name.clone(),
                path: path_str.clone(),
            })
        })
        .collect::<Result<_>>()?;

    let mut slots: BTreeMap<i64, Vec<CellAccum>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::DataFormat {
            path: path_str.clone(),
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let ts = parse_timestamp(record.get(ts_col).unwrap_or(""), &path_str, line)?;
        let slot = slot_index(ts, manifest.slot_minutes);
        let accums = slots
            .entry(slot)
            .or_insert_with(|| manifest.features.iter().map(CellAccum::new).collect());
        for (fi, spec) in manifest.features.iter().enumerate() {
            let raw = record.get(feature_cols[fi]).unwrap_or("");
            feed(&mut accums[fi], raw, spec, &path_str, line)?;
        }
    }
    if slots.is_empty() {
        return Err(Error::DataFormat {
            path: path_str,
            line: 0,
            msg: "no data rows".into(),
        });
    }
    Ok(ParsedFile { slots })
}

/// One bucketed slot: values and masks in (continuous block, discrete block)
/// order.
struct SlotRow {
    timestamp: DateTime<Utc>,
    continuous: Vec<f64>,
    continuous_mask: Vec<bool>,
    discrete: Vec<usize>,
    discrete_mask: Vec<bool>,
}

impl SlotRow {
    fn fully_missing(&self) -> bool {
        !self.continuous_mask.iter().any(|&m| m) && !self.discrete_mask.iter().any(|&m| m)
    }
}

fn bucket_file(parsed: ParsedFile, manifest: &DatasetManifest, path: &str) -> Result<Vec<SlotRow>> {
    let continuous_specs: Vec<(usize, &FeatureSpec)> = manifest
        .features
        .iter()
        .enumerate()
        .filter(|(_, f)| f.kind == FeatureKind::Continuous)
        .collect();
    let discrete_specs: Vec<(usize, &FeatureSpec)> = manifest
        .features
        .iter()
        .enumerate()
        .filter(|(_, f)| f.kind != FeatureKind::Continuous)
        .collect();

    let first = *parsed.slots.keys().next().unwrap();
    let last = *parsed.slots.keys().last().unwrap();
    let mut rows = Vec::with_capacity((last - first + 1) as usize);
    for slot in first..=last {
        let timestamp = slot_start(slot, manifest.slot_minutes);
        let mut row = SlotRow {
            timestamp,
            continuous: vec![f64::NAN; continuous_specs.len()],
            continuous_mask: vec![false; continuous_specs.len()],
            discrete: vec![0; discrete_specs.len()],
            discrete_mask: vec![false; discrete_specs.len()],
        };
        if let Some(accums) = parsed.slots.get(&slot) {
            for (out_idx, (fi, spec)) in continuous_specs.iter().enumerate() {
                if let CellAccum::Continuous { sum, count } = &accums[*fi] {
                    if *count > 0 {
                        let mut v = sum / *count as f64;
                        if spec.log1p {
                            if v <= -1.0 {
                                return Err(Error::DataFormat {
                                    path: path.to_string(),
                                    line: 0,
                                    msg: format!(
                                        "log1p undefined for `{}` value {v} in slot {timestamp}",
                                        spec.name
                                    ),
                                });
                            }
                            v = v.ln_1p();
                        }
                        row.continuous[out_idx] = v;
                        row.continuous_mask[out_idx] = true;
                    }
                }
            }
            for (out_idx, (fi, _)) in discrete_specs.iter().enumerate() {
                match &accums[*fi] {
                    CellAccum::Binary { any_positive, present } => {
                        if *present {
                            row.discrete[out_idx] = usize::from(*any_positive);
                            row.discrete_mask[out_idx] = true;
                        }
                    }
                    CellAccum::Categorical { counts } => {
                        if accums[*fi].present() {
                            // Mode, ties toward the lower category.
                            let best = *counts.iter().max().unwrap();
                            row.discrete[out_idx] =
                                counts.iter().position(|&c| c == best).unwrap();
                            row.discrete_mask[out_idx] = true;
                        }
                    }
                    CellAccum::Continuous { .. } => unreachable!(),
                }
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

fn split_on_gaps(rows: Vec<SlotRow>, slot_minutes: u32) -> Vec<Vec<SlotRow>> {
    let gap_slots = (GAP_SPLIT_HOURS * 60 / slot_minutes as i64).max(1) as usize;
    let mut segments = Vec::new();
    let mut current: Vec<SlotRow> = Vec::new();
    let mut pending_missing: Vec<SlotRow> = Vec::new();
    for row in rows {
        if row.fully_missing() {
            pending_missing.push(row);
            continue;
        }
        if pending_missing.len() > gap_slots {
            // Gap exceeds the threshold: close the current segment and drop
            // the gap rows entirely.
            if !current.is_empty() {
                segments.push(std::mem::take(&mut current));
            }
        } else {
            current.append(&mut pending_missing);
        }
        pending_missing.clear();
        current.push(row);
    }
    // Trailing fully-missing rows cannot exist: the span ends at the last
    // slot with data. (They could only arise from an all-missing file, which
    // parse_file rejects.)
    if !current.is_empty() {
        segments.push(current);
    }
    segments
}

fn rows_to_sequence(rows: Vec<SlotRow>, manifest: &DatasetManifest) -> Result<ObservationSequence> {
    let t = rows.len();
    let g = rows[0].continuous.len();
    let j = rows[0].discrete.len();
    let timestamps = rows.iter().map(|r| r.timestamp).collect();
    let continuous = Array2::from_shape_fn((t, g), |(r, c)| rows[r].continuous[c]);
    let continuous_mask = Array2::from_shape_fn((t, g), |(r, c)| rows[r].continuous_mask[c]);
    let discrete = Array2::from_shape_fn((t, j), |(r, c)| rows[r].discrete[c]);
    let discrete_mask = Array2::from_shape_fn((t, j), |(r, c)| rows[r].discrete_mask[c]);
    ObservationSequence::new(
        timestamps,
        continuous,
        continuous_mask,
        discrete,
        discrete_mask,
        manifest.ordered_feature_names(),
        manifest.cardinalities(),
    )
}

/// Read every sequence file of the manifest: parse, bucket onto the slot
/// grid (continuous: mean within slot; binary: any positive value; missing
/// slots padded only inside each file's observed span), then split at long
/// fully-missing gaps.
pub fn ingest_csv(manifest: &DatasetManifest) -> Result<Vec<ObservationSequence>> {
    manifest.validate()?;
    let mut out = Vec::new();
    for path in &manifest.sequences {
        let parsed = parse_file(path, manifest)?;
        let rows = bucket_file(parsed, manifest, &path.display().to_string())?;
        for segment in split_on_gaps(rows, manifest.slot_minutes) {
            out.push(rows_to_sequence(segment, manifest)?);
        }
    }
    Ok(out)
}

fn stage_to_label(stage: &str, path: &str, line: usize) -> Result<u8> {
    match stage.trim().to_ascii_lowercase().as_str() {
        "awake" => Ok(0),
        "light" | "deep" | "rem" => Ok(1),
        other => Err(Error::DataFormat {
            path: path.to_string(),
            line,
            msg: format!("unknown sleep stage `{other}`"),
        }),
    }
}

/// Read one label CSV. A `stage` column carries wearable stages
/// (awake/light/deep/rem); a `label` or `sleep` column carries 0/1 directly.
/// Rows are bucketed per slot by binary majority, ties toward asleep.
pub fn read_label_file(path: &Path, slot_minutes: u32) -> Result<SleepLabels> {
    let path_str = path.display().to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::DataFormat {
        path: path_str.clone(),
        line: 0,
        msg: e.to_string(),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::DataFormat {
            path: path_str.clone(),
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let col_of = |name: &str| headers.iter().position(|h| h.trim() == name);
    let ts_col = col_of("timestamp").ok_or_else(|| Error::DataFormat {
        path: path_str.clone(),
        line: 1,
        msg: "missing `timestamp` column".into(),
    })?;
    let (value_col, is_stage) = match (col_of("stage"), col_of("label"), col_of("sleep")) {
        (Some(c), _, _) => (c, true),
        (None, Some(c), _) => (c, false),
        (None, None, Some(c)) => (c, false),
        _ => {
            return Err(Error::DataFormat {
                path: path_str,
                line: 1,
                msg: "need a `stage`, `label`, or `sleep` column".into(),
            })
        }
    };

    // Per-slot votes: (asleep, awake).
    let mut votes: BTreeMap<i64, (usize, usize)> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::DataFormat {
            path: path_str.clone(),
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let ts = parse_timestamp(record.get(ts_col).unwrap_or(""), &path_str, line)?;
        let raw = record.get(value_col).unwrap_or("").trim();
        if raw.is_empty() {
            continue;
        }
        let label = if is_stage {
            stage_to_label(raw, &path_str, line)?
        } else {
            match raw {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(Error::DataFormat {
                        path: path_str.clone(),
                        line,
                        msg: format!("label must be 0 or 1, got `{other}`"),
                    })
                }
            }
        };
        let slot = slot_index(ts, slot_minutes);
        let entry = votes.entry(slot).or_insert((0, 0));
        if label == 1 {
            entry.0 += 1;
        } else {
            entry.1 += 1;
        }
    }
    if votes.is_empty() {
        return Err(Error::DataFormat {
            path: path_str,
            line: 0,
            msg: "no labeled rows".into(),
        });
    }
    let mut timestamps = Vec::with_capacity(votes.len());
    let mut labels = Vec::with_capacity(votes.len());
    for (slot, (asleep, awake)) in votes {
        timestamps.push(slot_start(slot, slot_minutes));
        labels.push(u8::from(asleep >= awake));
    }
    SleepLabels::new(timestamps, labels, LabelSource::Wearable)
}

/// Read every label file of the manifest.
pub fn ingest_labels(manifest: &DatasetManifest) -> Result<Vec<SleepLabels>> {
    manifest
        .labels
        .iter()
        .map(|p| read_label_file(p, manifest.slot_minutes))
        .collect()
}
