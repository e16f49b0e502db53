//! Tidy per-slot CSV exports: plot data behind prediction figures, and raw
//! sequence dumps that ingest back losslessly.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};
use ndarray::Array2;

use crate::data::{ObservationSequence, SleepLabels};
use crate::error::{Error, Result};
use crate::pipeline::manifest::FeatureSpec;

fn fmt_ts(ts: &DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Secs, true)
}

fn fmt_f64(v: f64) -> String {
    // Shortest round-trip representation; deterministic across runs.
    format!("{v}")
}

/// Write the tidy plot-data CSV for one sequence: timestamp, per-feature
/// value and mask columns, per-state gamma columns, the predicted binary
/// label, and the truth label when available.
pub fn emit_plot_data(
    path: &Path,
    seq: &ObservationSequence,
    gamma: &Array2<f64>,
    pred: &SleepLabels,
    truth: Option<&SleepLabels>,
) -> Result<()> {
    let t_len = seq.num_slots();
    let states = gamma.ncols();
    if gamma.nrows() != t_len || pred.len() != t_len {
        return Err(Error::Shape(format!(
            "plot data expects {t_len} slots; gamma has {}, prediction has {}",
            gamma.nrows(),
            pred.len()
        )));
    }
    let truth_by_ts: BTreeMap<&DateTime<Utc>, u8> = truth
        .map(|t| t.timestamps.iter().zip(t.labels.iter().copied()).collect())
        .unwrap_or_default();

    let mut header = vec!["timestamp".to_string()];
    for name in seq.feature_names() {
        header.push(name.clone());
        header.push(format!("{name}_mask"));
    }
    for i in 0..states {
        header.push(format!("gamma_{i}"));
    }
    header.push("label".to_string());
    if truth.is_some() {
        header.push("truth".to_string());
    }

    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let g = seq.num_continuous();
    let mut line = String::new();
    writeln!(file, "{}", header.join(",")).map_err(|e| Error::io(path.display().to_string(), e))?;
    for t in 0..t_len {
        line.clear();
        line.push_str(&fmt_ts(&seq.timestamps()[t]));
        for c in 0..g {
            line.push(',');
            if seq.continuous_mask()[[t, c]] {
                line.push_str(&fmt_f64(seq.continuous()[[t, c]]));
            }
            line.push(',');
            line.push(if seq.continuous_mask()[[t, c]] { '1' } else { '0' });
        }
        for d in 0..seq.num_discrete() {
            line.push(',');
            if seq.discrete_mask()[[t, d]] {
                line.push_str(&seq.discrete()[[t, d]].to_string());
            }
            line.push(',');
            line.push(if seq.discrete_mask()[[t, d]] { '1' } else { '0' });
        }
        for i in 0..states {
            line.push(',');
            line.push_str(&fmt_f64(gamma[[t, i]]));
        }
        line.push(',');
        line.push_str(&pred.labels[t].to_string());
        if truth.is_some() {
            line.push(',');
            if let Some(v) = truth_by_ts.get(&seq.timestamps()[t]) {
                line.push_str(&v.to_string());
            }
        }
        writeln!(file, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// Write a raw sequence CSV (`timestamp,<features...>`, empty cell =
/// missing) that round-trips through ingestion. Features flagged `log1p` in
/// the schema are inverse-transformed on the way out, since ingestion will
/// re-apply the transform.
pub fn write_sequence_csv(
    path: &Path,
    seq: &ObservationSequence,
    schema: &[FeatureSpec],
) -> Result<()> {
    let by_name: BTreeMap<&str, &FeatureSpec> =
        schema.iter().map(|f| (f.name.as_str(), f)).collect();
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let names = seq.feature_names();
    writeln!(file, "timestamp,{}", names.join(","))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let g = seq.num_continuous();
    let mut line = String::new();
    for t in 0..seq.num_slots() {
        line.clear();
        line.push_str(&fmt_ts(&seq.timestamps()[t]));
        for c in 0..g {
            line.push(',');
            if seq.continuous_mask()[[t, c]] {
                let mut v = seq.continuous()[[t, c]];
                if by_name.get(names[c].as_str()).is_some_and(|f| f.log1p) {
                    v = v.exp_m1();
                }
                line.push_str(&fmt_f64(v));
            }
        }
        for d in 0..seq.num_discrete() {
            line.push(',');
            if seq.discrete_mask()[[t, d]] {
                line.push_str(&seq.discrete()[[t, d]].to_string());
            }
        }
        writeln!(file, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// Write a wearable-style label CSV (`timestamp,stage`) with awake/light
/// stages, the format ingest_labels reads back.
pub fn write_labels_csv(path: &Path, labels: &SleepLabels) -> Result<()> {
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    writeln!(file, "timestamp,stage").map_err(|e| Error::io(path.display().to_string(), e))?;
    for (ts, &label) in labels.timestamps.iter().zip(labels.labels.iter()) {
        let stage = if label == 1 { "light" } else { "awake" };
        writeln!(file, "{},{stage}", fmt_ts(ts))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// Write a plain binary label CSV (`timestamp,label`).
pub fn write_binary_label_csv(path: &Path, labels: &SleepLabels) -> Result<()> {
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    writeln!(file, "timestamp,label").map_err(|e| Error::io(path.display().to_string(), e))?;
    for (ts, &label) in labels.timestamps.iter().zip(labels.labels.iter()) {
        writeln!(file, "{},{label}", fmt_ts(ts))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// Write per-slot predictions: timestamp, decoded state, binary sleep label.
pub fn write_predictions_csv(
    path: &Path,
    seq: &ObservationSequence,
    states: &[usize],
    labels: &SleepLabels,
) -> Result<()> {
    if states.len() != seq.num_slots() || labels.len() != seq.num_slots() {
        return Err(Error::Shape("prediction lengths do not match the sequence".into()));
    }
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    writeln!(file, "timestamp,state,sleep")
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    for t in 0..seq.num_slots() {
        writeln!(
            file,
            "{},{},{}",
            fmt_ts(&seq.timestamps()[t]),
            states[t],
            labels.labels[t]
        )
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

/// Expected plot-data column count: timestamp + value/mask pairs + gammas +
/// label (+ truth).
pub fn plot_column_count(g: usize, j: usize, states: usize, with_truth: bool) -> usize {
    1 + (g + j) * 2 + states + 1 + usize::from(with_truth)
}
