//! Run reports: one JSON document per CLI invocation, deterministic except
//! for the timing block.

use std::path::Path;

use serde::Serialize;

use crate::baselines::EvaluationMetrics;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize)]
pub struct SequenceMetrics {
    pub index: usize,
    pub slots: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_likelihood: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<EvaluationMetrics>,
}

/// Mean ± standard deviation (population) of each metric across sequences,
/// plus the pooled counts. Recomputable from the per-sequence rows.
#[derive(Debug, Clone, Serialize)]
pub struct AggregateMetrics {
    pub sequences: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub specificity_mean: f64,
    pub specificity_std: f64,
    pub sensitivity_mean: f64,
    pub sensitivity_std: f64,
    pub pooled: EvaluationMetrics,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let defined: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if defined.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = defined.len() as f64;
    let mean = defined.iter().sum::<f64>() / n;
    let var = defined.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl AggregateMetrics {
    pub fn from_rows(rows: &[SequenceMetrics], pooled: EvaluationMetrics) -> Self {
        let collect = |f: fn(&EvaluationMetrics) -> f64| -> Vec<f64> {
            rows.iter()
                .filter_map(|r| r.metrics.as_ref())
                .map(f)
                .collect()
        };
        let (accuracy_mean, accuracy_std) = mean_std(&collect(|m| m.accuracy));
        let (specificity_mean, specificity_std) = mean_std(&collect(|m| m.specificity));
        let (sensitivity_mean, sensitivity_std) = mean_std(&collect(|m| m.sensitivity));
        AggregateMetrics {
            sequences: rows.iter().filter(|r| r.metrics.is_some()).count(),
            accuracy_mean,
            accuracy_std,
            specificity_mean,
            specificity_std,
            sensitivity_mean,
            sensitivity_std,
            pooled,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub seconds: f64,
}

/// The per-run report document.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub command: String,
    pub seed: u64,
    /// Echo of the effective configuration.
    pub config: serde_json::Value,
    pub per_sequence: Vec<SequenceMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aggregate: Option<AggregateMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_file: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extra: Option<serde_json::Value>,
    pub outputs: Vec<String>,
    pub timing: Timing,
}

impl RunReport {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        RunReport {
            command: command.to_string(),
            seed,
            config,
            per_sequence: Vec::new(),
            aggregate: None,
            model_file: None,
            extra: None,
            outputs: Vec::new(),
            timing: Timing { seconds: 0.0 },
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))
    }
}
