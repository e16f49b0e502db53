//! The `hhmm` command line: train, select, infer, evaluate, baseline, and
//! simulate subcommands. Every run writes a `report.json` into the output
//! directory; all outputs are deterministic for a fixed seed (timing fields
//! aside).

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use crate::baselines::{self, Imputer};
use crate::data::{LabelSource, ObservationSequence, SleepLabels};
use crate::error::{Error, Result};
use crate::learning::{self, restart_seed, CovarianceType, FitConfig, InitStrategy};
use crate::model::{ClampEntry, Constraints};
use crate::pipeline::{
    self, DatasetManifest, FeatureKind, FeatureSpec, RunReport, SavedModel, SequenceMetrics,
};
use crate::selection;
use crate::sim::{self, MissingRates};
use crate::inference;

#[derive(Parser)]
#[command(
    name = "hhmm",
    version,
    about = "Sleep activity recognition with heterogeneous hidden Markov models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Shared {
    /// Output directory (created if absent).
    #[arg(long)]
    out: PathBuf,
    /// Base random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON file overriding fit configuration and constraints.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model on the manifest's sequences.
    Train {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        manifest: PathBuf,
        /// Number of hidden states.
        #[arg(long)]
        states: usize,
        /// Fixed discrete emission entry, e.g.
        /// `state=4,feature=app_usage,value=1,prob=0` (repeatable).
        #[arg(long = "clamp")]
        clamps: Vec<String>,
        /// States to read out as asleep, e.g. `4,5`.
        #[arg(long)]
        sleep_states: Option<String>,
    },
    /// Sweep the number of hidden states and pick the BIC minimum.
    Select {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        manifest: PathBuf,
        /// Inclusive range of state counts, e.g. `1..6`.
        #[arg(long)]
        states_range: String,
        #[arg(long = "clamp")]
        clamps: Vec<String>,
        #[arg(long)]
        sleep_states: Option<String>,
    },
    /// Decode sequences with a trained model.
    Infer {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Compare a prediction label file against a truth label file.
    Evaluate {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Slot length in minutes used to align the two files.
        #[arg(long, default_value_t = 10)]
        slot_minutes: u32,
    },
    /// Run a comparison method against the manifest's labels.
    Baseline {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_parser = ["kmeans", "gmm", "most_frequent", "uniform"])]
        method: String,
        /// Missing-data imputation method (1: mean/zero, 2: mean/mode).
        #[arg(long, default_value_t = 1)]
        imputer: u8,
        /// Continuous feature whose low mean marks the asleep cluster
        /// (default: the first continuous feature).
        #[arg(long)]
        activity_feature: Option<String>,
    },
    /// Sample synthetic day sequences from a model.
    Simulate {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        days: usize,
        /// Per-feature missing rates: a single rate or
        /// `name=rate,name=rate,...`.
        #[arg(long)]
        missing: Option<String>,
    },
}

/// Optional config file: `{"fit": {...}, "constraints": {...}}`.
#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct ConfigFile {
    fit: FitPatch,
    constraints: ConstraintsSpec,
    activity_feature: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct FitPatch {
    max_iterations: Option<usize>,
    tolerance: Option<f64>,
    init: Option<InitStrategy>,
    restarts: Option<usize>,
    seed: Option<u64>,
    covariance: Option<CovarianceType>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct ConstraintsSpec {
    fixed_entries: Vec<ClampSpec>,
    sleep_states: Vec<usize>,
}

/// Clamp entry with the feature addressed by name.
#[derive(Debug, Deserialize)]
struct ClampSpec {
    state: usize,
    feature: String,
    value: usize,
    prob: f64,
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    match path {
        None => Ok(ConfigFile::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::io(p.display().to_string(), e))?;
            serde_json::from_str(&text).map_err(|e| Error::Json {
                path: p.display().to_string(),
                source: e,
            })
        }
    }
}

fn effective_fit_config(file: &ConfigFile, seed_flag: Option<u64>) -> FitConfig {
    let mut cfg = FitConfig::default();
    let patch = &file.fit;
    if let Some(v) = patch.max_iterations {
        cfg.max_iterations = v;
    }
    if let Some(v) = patch.tolerance {
        cfg.tolerance = v;
    }
    if let Some(v) = patch.init {
        cfg.init = v;
    }
    if let Some(v) = patch.restarts {
        cfg.restarts = v;
    }
    if let Some(v) = patch.seed {
        cfg.seed = v;
    }
    if let Some(v) = patch.covariance {
        cfg.covariance = v;
    }
    if let Some(v) = seed_flag {
        cfg.seed = v;
    }
    cfg
}

fn discrete_feature_index(manifest: &DatasetManifest, name: &str) -> Result<usize> {
    manifest
        .discrete_specs()
        .iter()
        .position(|f| f.name == name)
        .ok_or_else(|| Error::InvalidArgument(format!("`{name}` is not a discrete feature")))
}

fn parse_clamp_flag(raw: &str, manifest: &DatasetManifest) -> Result<ClampEntry> {
    let mut state = None;
    let mut feature = None;
    let mut value = None;
    let mut prob = None;
    for part in raw.split(',') {
        let (key, val) = part.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!("clamp spec `{raw}`: expected key=value pairs"))
        })?;
        match key.trim() {
            "state" => state = Some(val.trim().parse::<usize>().map_err(|_| bad_clamp(raw))?),
            "feature" => feature = Some(val.trim().to_string()),
            "value" | "category" => {
                value = Some(val.trim().parse::<usize>().map_err(|_| bad_clamp(raw))?)
            }
            "prob" => prob = Some(val.trim().parse::<f64>().map_err(|_| bad_clamp(raw))?),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "clamp spec `{raw}`: unknown key `{other}`"
                )))
            }
        }
    }
    let (state, feature, value, prob) = match (state, feature, value, prob) {
        (Some(s), Some(f), Some(v), Some(p)) => (s, f, v, p),
        _ => return Err(bad_clamp(raw)),
    };
    Ok(ClampEntry {
        state,
        feature: discrete_feature_index(manifest, &feature)?,
        category: value,
        prob,
    })
}

fn bad_clamp(raw: &str) -> Error {
    Error::InvalidArgument(format!(
        "clamp spec `{raw}`: need state=N,feature=NAME,value=V,prob=P"
    ))
}

fn parse_sleep_states(raw: &str) -> Result<BTreeSet<usize>> {
    raw.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("bad sleep state `{s}`")))
        })
        .collect()
}

fn effective_constraints(
    file: &ConfigFile,
    manifest: &DatasetManifest,
    clamp_flags: &[String],
    sleep_flag: Option<&str>,
) -> Result<Constraints> {
    let mut constraints = Constraints::none();
    for spec in &file.constraints.fixed_entries {
        constraints.fixed_entries.push(ClampEntry {
            state: spec.state,
            feature: discrete_feature_index(manifest, &spec.feature)?,
            category: spec.value,
            prob: spec.prob,
        });
    }
    constraints.sleep_states = file.constraints.sleep_states.iter().copied().collect();
    for raw in clamp_flags {
        constraints.fixed_entries.push(parse_clamp_flag(raw, manifest)?);
    }
    if let Some(raw) = sleep_flag {
        constraints.sleep_states = parse_sleep_states(raw)?;
    }
    Ok(constraints)
}

fn parse_states_range(raw: &str) -> Result<Vec<usize>> {
    let raw = raw.trim();
    let parse = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| Error::InvalidArgument(format!("bad state count `{s}` in `{raw}`")))
    };
    if let Some((a, b)) = raw.split_once("..=").or_else(|| raw.split_once("..")) {
        let (lo, hi) = (parse(a)?, parse(b)?);
        if lo == 0 || hi < lo {
            return Err(Error::InvalidArgument(format!("empty state range `{raw}`")));
        }
        Ok((lo..=hi).collect())
    } else {
        Ok(vec![parse(raw)?])
    }
}

fn parse_missing_spec(
    raw: Option<&str>,
    features: &[FeatureSpec],
) -> Result<MissingRates> {
    let continuous: Vec<&FeatureSpec> = features
        .iter()
        .filter(|f| f.kind == FeatureKind::Continuous)
        .collect();
    let discrete: Vec<&FeatureSpec> = features
        .iter()
        .filter(|f| f.kind != FeatureKind::Continuous)
        .collect();
    let mut rates = MissingRates::none(continuous.len(), discrete.len());
    let Some(raw) = raw else {
        return Ok(rates);
    };
    let raw = raw.trim();
    if !raw.contains('=') {
        let rate: f64 = raw
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad missing rate `{raw}`")))?;
        return Ok(MissingRates::uniform(continuous.len(), discrete.len(), rate));
    }
    for part in raw.split(',') {
        let (name, val) = part.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!("missing spec `{raw}`: expected name=rate pairs"))
        })?;
        let rate: f64 = val
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad missing rate `{val}`")))?;
        let name = name.trim();
        if let Some(idx) = continuous.iter().position(|f| f.name == name) {
            rates.continuous[idx] = rate;
        } else if let Some(idx) = discrete.iter().position(|f| f.name == name) {
            rates.discrete[idx] = rate;
        } else {
            return Err(Error::InvalidArgument(format!("unknown feature `{name}`")));
        }
    }
    Ok(rates)
}

fn activity_feature_index(
    manifest_features: &[FeatureSpec],
    requested: Option<&str>,
) -> Result<usize> {
    let continuous: Vec<&FeatureSpec> = manifest_features
        .iter()
        .filter(|f| f.kind == FeatureKind::Continuous)
        .collect();
    if continuous.is_empty() {
        return Err(Error::InvalidArgument(
            "clustering baselines need at least one continuous feature".into(),
        ));
    }
    match requested {
        None => Ok(0),
        Some(name) => continuous
            .iter()
            .position(|f| f.name == name)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("`{name}` is not a continuous feature"))
            }),
    }
}

/// Merge all truth label streams into one slot map.
fn truth_map(labels: &[SleepLabels]) -> BTreeMap<DateTime<Utc>, u8> {
    let mut map = BTreeMap::new();
    for stream in labels {
        for (ts, &label) in stream.timestamps.iter().zip(stream.labels.iter()) {
            map.insert(*ts, label);
        }
    }
    map
}

/// Truth restricted to one sequence's slots, or None when disjoint.
fn truth_for_sequence(
    map: &BTreeMap<DateTime<Utc>, u8>,
    seq: &ObservationSequence,
) -> Option<SleepLabels> {
    let mut timestamps = Vec::new();
    let mut labels = Vec::new();
    for ts in seq.timestamps() {
        if let Some(&label) = map.get(ts) {
            timestamps.push(*ts);
            labels.push(label);
        }
    }
    if timestamps.is_empty() {
        None
    } else {
        Some(SleepLabels::new(timestamps, labels, LabelSource::Wearable).expect("sorted slots"))
    }
}

fn ensure_out_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::EmptySleepStates => 2,
        Error::EmissionUnderflow { .. }
        | Error::StateCollapse { .. }
        | Error::AllRestartsFailed { .. }
        | Error::SingularCovariance
        | Error::DegenerateClustering(_)
        | Error::SweepFailed
        | Error::EmptyIndexSet => 4,
        _ => 3,
    }
}

/// Run the CLI; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            let payload = json!({ "error": e.to_string(), "exit_code": code });
            let mut stderr = std::io::stderr();
            let _ = writeln!(stderr, "{payload}");
            code
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    let started = Instant::now();
    match command {
        Command::Train {
            shared,
            manifest,
            states,
            clamps,
            sleep_states,
        } => cmd_train(shared, &manifest, states, &clamps, sleep_states.as_deref(), started),
        Command::Select {
            shared,
            manifest,
            states_range,
            clamps,
            sleep_states,
        } => cmd_select(
            shared,
            &manifest,
            &states_range,
            &clamps,
            sleep_states.as_deref(),
            started,
        ),
        Command::Infer {
            shared,
            manifest,
            model,
        } => cmd_infer(shared, &manifest, &model, started),
        Command::Evaluate {
            shared,
            pred,
            truth,
            slot_minutes,
        } => cmd_evaluate(shared, &pred, &truth, slot_minutes, started),
        Command::Baseline {
            shared,
            manifest,
            method,
            imputer,
            activity_feature,
        } => cmd_baseline(
            shared,
            &manifest,
            &method,
            imputer,
            activity_feature.as_deref(),
            started,
        ),
        Command::Simulate {
            shared,
            model,
            days,
            missing,
        } => cmd_simulate(shared, &model, days, missing.as_deref(), started),
    }
}

fn finish_report(mut report: RunReport, out: &Path, started: Instant) -> Result<()> {
    report.timing = pipeline::Timing {
        seconds: started.elapsed().as_secs_f64(),
    };
    report.write(&out.join("report.json"))
}

fn cmd_train(
    shared: Shared,
    manifest_path: &Path,
    states: usize,
    clamps: &[String],
    sleep_states: Option<&str>,
    started: Instant,
) -> Result<()> {
    ensure_out_dir(&shared.out)?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let seqs = pipeline::ingest_csv(&manifest)?;
    let config_file = load_config(shared.config.as_deref())?;
    let fit_config = effective_fit_config(&config_file, shared.seed);
    let constraints = effective_constraints(&config_file, &manifest, clamps, sleep_states)?;

    let result = learning::fit(&seqs, states, &constraints, &fit_config)?;
    let saved = SavedModel {
        params: result.params,
        features: manifest.features.clone(),
        sleep_states: constraints.sleep_states.clone(),
    };
    let model_path = shared.out.join("model.json");
    pipeline::save_model(&model_path, &saved)?;

    let (posts, total_ll) = learning::e_step(&saved.params, &seqs)?;
    let mut report = RunReport::new(
        "train",
        fit_config.seed,
        json!({
            "fit": fit_config,
            "states": states,
            "constraints": {
                "fixed_entries": saved.params.clamp,
                "sleep_states": saved.sleep_states.iter().collect::<Vec<_>>(),
            },
            "manifest": manifest_path.display().to_string(),
        }),
    );
    report.per_sequence = seqs
        .iter()
        .zip(posts.iter())
        .enumerate()
        .map(|(index, (seq, post))| SequenceMetrics {
            index,
            slots: seq.num_slots(),
            log_likelihood: Some(post.log_likelihood),
            metrics: None,
        })
        .collect();
    report.model_file = Some("model.json".into());
    report.extra = Some(json!({
        "log_likelihood": total_ll,
        "trace": result.trace,
        "restart": result.restart,
        "converged": result.converged,
    }));
    report.outputs = vec!["model.json".into(), "report.json".into()];
    finish_report(report, &shared.out, started)
}

fn cmd_select(
    shared: Shared,
    manifest_path: &Path,
    states_range: &str,
    clamps: &[String],
    sleep_states: Option<&str>,
    started: Instant,
) -> Result<()> {
    ensure_out_dir(&shared.out)?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let seqs = pipeline::ingest_csv(&manifest)?;
    let config_file = load_config(shared.config.as_deref())?;
    let fit_config = effective_fit_config(&config_file, shared.seed);
    let constraints = effective_constraints(&config_file, &manifest, clamps, sleep_states)?;
    let candidates = parse_states_range(states_range)?;

    let sweep = selection::sweep_states(&seqs, candidates, &constraints, &fit_config)?;

    let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let csv_path = shared.out.join("selection.csv");
    let mut table = String::from("I,loglik,k,bic,aic\n");
    let mut plot = String::from("I,bic,aic\n");
    for row in &sweep.rows {
        table.push_str(&format!(
            "{},{},{},{},{}\n",
            row.num_states,
            fmt_opt(row.log_likelihood),
            row.parameter_count,
            fmt_opt(row.bic),
            fmt_opt(row.aic),
        ));
        plot.push_str(&format!(
            "{},{},{}\n",
            row.num_states,
            fmt_opt(row.bic),
            fmt_opt(row.aic)
        ));
    }
    std::fs::write(&csv_path, table)
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    let plot_path = shared.out.join("selection_plot.csv");
    std::fs::write(&plot_path, plot)
        .map_err(|e| Error::io(plot_path.display().to_string(), e))?;

    let mut report = RunReport::new(
        "select",
        fit_config.seed,
        json!({
            "fit": fit_config,
            "states_range": states_range,
            "manifest": manifest_path.display().to_string(),
        }),
    );
    report.extra = Some(json!({ "rows": sweep.rows, "chosen": sweep.chosen }));
    report.outputs = vec![
        "selection.csv".into(),
        "selection_plot.csv".into(),
        "report.json".into(),
    ];
    finish_report(report, &shared.out, started)
}

fn cmd_infer(
    shared: Shared,
    manifest_path: &Path,
    model_path: &Path,
    started: Instant,
) -> Result<()> {
    ensure_out_dir(&shared.out)?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let saved = pipeline::load_model(model_path)?;
    if manifest.features != saved.features {
        return Err(Error::Shape(
            "manifest feature schema does not match the model's".into(),
        ));
    }
    if saved.sleep_states.is_empty() {
        return Err(Error::EmptySleepStates);
    }
    let seqs = pipeline::ingest_csv(&manifest)?;
    let truth = truth_map(&pipeline::ingest_labels(&manifest)?);
    let constraints = saved.constraints();

    let mut report = RunReport::new(
        "infer",
        shared.seed.unwrap_or(0),
        json!({
            "model": model_path.display().to_string(),
            "manifest": manifest_path.display().to_string(),
        }),
    );
    for (index, seq) in seqs.iter().enumerate() {
        let posts = inference::forward_backward(&saved.params, seq)?;
        let (path, _) = inference::viterbi(&saved.params, seq)?;
        let labels = sim::binarize_states(&path, seq.timestamps(), &constraints)?;
        let pred_path = shared.out.join(format!("pred_{index:03}.csv"));
        pipeline::write_predictions_csv(&pred_path, seq, &path, &labels)?;
        let plot_path = shared.out.join(format!("plot_{index:03}.csv"));
        let seq_truth = truth_for_sequence(&truth, seq);
        pipeline::emit_plot_data(&plot_path, seq, &posts.gamma, &labels, seq_truth.as_ref())?;
        report.per_sequence.push(SequenceMetrics {
            index,
            slots: seq.num_slots(),
            log_likelihood: Some(posts.log_likelihood),
            metrics: None,
        });
        report
            .outputs
            .push(format!("pred_{index:03}.csv"));
        report.outputs.push(format!("plot_{index:03}.csv"));
    }
    report.outputs.push("report.json".into());
    finish_report(report, &shared.out, started)
}

fn cmd_evaluate(
    shared: Shared,
    pred_path: &Path,
    truth_path: &Path,
    slot_minutes: u32,
    started: Instant,
) -> Result<()> {
    ensure_out_dir(&shared.out)?;
    let pred = pipeline::read_label_file(pred_path, slot_minutes)?;
    let truth = pipeline::read_label_file(truth_path, slot_minutes)?;
    let metrics = baselines::evaluate(&pred, &truth)?;
    let mut report = RunReport::new(
        "evaluate",
        shared.seed.unwrap_or(0),
        json!({
            "pred": pred_path.display().to_string(),
            "truth": truth_path.display().to_string(),
            "slot_minutes": slot_minutes,
        }),
    );
    report.per_sequence = vec![SequenceMetrics {
        index: 0,
        slots: metrics.counts.total() as usize,
        log_likelihood: None,
        metrics: Some(metrics),
    }];
    report.aggregate = Some(pipeline::AggregateMetrics::from_rows(
        &report.per_sequence,
        metrics,
    ));
    report.outputs = vec!["report.json".into()];
    finish_report(report, &shared.out, started)
}

fn cmd_baseline(
    shared: Shared,
    manifest_path: &Path,
    method: &str,
    imputer_id: u8,
    activity_feature: Option<&str>,
    started: Instant,
) -> Result<()> {
    ensure_out_dir(&shared.out)?;
    let manifest = DatasetManifest::load(manifest_path)?;
    if manifest.labels.is_empty() {
        return Err(Error::InvalidArgument(
            "baseline evaluation needs label files in the manifest".into(),
        ));
    }
    let config_file = load_config(shared.config.as_deref())?;
    let seed = shared.seed.unwrap_or(0);
    let imputer = match imputer_id {
        1 => Imputer::MeanAndZero,
        2 => Imputer::MeanAndMode,
        other => {
            return Err(Error::InvalidArgument(format!(
                "imputer must be 1 or 2, got {other}"
            )))
        }
    };
    let seqs = pipeline::ingest_csv(&manifest)?;
    let truth = truth_map(&pipeline::ingest_labels(&manifest)?);

    let activity = activity_feature.or(config_file.activity_feature.as_deref());
    let predictions: Vec<SleepLabels> = match method {
        "kmeans" => {
            let idx = activity_feature_index(&manifest.features, activity)?;
            baselines::kmeans_sleep(&seqs, imputer, idx, seed)?
        }
        "gmm" => {
            let idx = activity_feature_index(&manifest.features, activity)?;
            baselines::gmm_sleep(&seqs, imputer, idx, seed)?
        }
        "most_frequent" => {
            let streams: Vec<SleepLabels> = seqs
                .iter()
                .filter_map(|seq| truth_for_sequence(&truth, seq))
                .collect();
            if streams.is_empty() {
                return Err(Error::NoJointSlots);
            }
            baselines::dummy_most_frequent(&streams)?
        }
        "uniform" => seqs
            .iter()
            .enumerate()
            .map(|(i, seq)| baselines::dummy_uniform(restart_seed(seed, i), seq.timestamps()))
            .collect::<Result<_>>()?,
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown baseline method `{other}`"
            )))
        }
    };

    let mut report = RunReport::new(
        "baseline",
        seed,
        json!({
            "method": method,
            "imputer": imputer_id,
            "manifest": manifest_path.display().to_string(),
        }),
    );
    let mut joined_preds = Vec::new();
    let mut joined_truths = Vec::new();
    for (index, pred) in predictions.iter().enumerate() {
        let out_path = shared.out.join(format!("baseline_pred_{index:03}.csv"));
        pipeline::write_binary_label_csv(&out_path, pred)?;
        report.outputs.push(format!("baseline_pred_{index:03}.csv"));
        let truth_stream = match method {
            // most_frequent predictions are already aligned to truth slots.
            "most_frequent" => Some(pred_aligned_truth(&truth, pred)),
            _ => seqs.get(index).and_then(|s| truth_for_sequence(&truth, s)),
        };
        let evaluated = match &truth_stream {
            Some(t) => match baselines::evaluate(pred, t) {
                Ok(m) => Some(m),
                Err(Error::NoJointSlots) => None,
                Err(e) => return Err(e),
            },
            None => None,
        };
        if let Some(m) = evaluated {
            joined_preds.push(pred.clone());
            joined_truths.push(truth_stream.expect("metrics imply truth"));
            report.per_sequence.push(SequenceMetrics {
                index,
                slots: m.counts.total() as usize,
                log_likelihood: None,
                metrics: Some(m),
            });
        } else {
            report.per_sequence.push(SequenceMetrics {
                index,
                slots: 0,
                log_likelihood: None,
                metrics: None,
            });
        }
    }
    let pooled = baselines::evaluate_all(&joined_preds, &joined_truths)?;
    report.aggregate = Some(pipeline::AggregateMetrics::from_rows(
        &report.per_sequence,
        pooled,
    ));
    report.outputs.push("report.json".into());
    finish_report(report, &shared.out, started)
}

fn pred_aligned_truth(
    map: &BTreeMap<DateTime<Utc>, u8>,
    pred: &SleepLabels,
) -> SleepLabels {
    let mut timestamps = Vec::new();
    let mut labels = Vec::new();
    for ts in &pred.timestamps {
        if let Some(&label) = map.get(ts) {
            timestamps.push(*ts);
            labels.push(label);
        }
    }
    SleepLabels::new(timestamps, labels, LabelSource::Wearable).expect("sorted slots")
}

fn cmd_simulate(
    shared: Shared,
    model_path: &Path,
    days: usize,
    missing: Option<&str>,
    started: Instant,
) -> Result<()> {
    ensure_out_dir(&shared.out)?;
    if days == 0 {
        return Err(Error::InvalidArgument("need at least one day".into()));
    }
    let saved = pipeline::load_model(model_path)?;
    let rates = parse_missing_spec(missing, &saved.features)?;
    let seed = shared.seed.unwrap_or(0);
    let slots_per_day = 144;
    let names: Vec<String> = {
        let mut continuous: Vec<String> = saved
            .features
            .iter()
            .filter(|f| f.kind == FeatureKind::Continuous)
            .map(|f| f.name.clone())
            .collect();
        continuous.extend(
            saved
                .features
                .iter()
                .filter(|f| f.kind != FeatureKind::Continuous)
                .map(|f| f.name.clone()),
        );
        continuous
    };
    let constraints = saved.constraints();

    let mut manifest = DatasetManifest {
        sequences: Vec::new(),
        features: saved.features.clone(),
        slot_minutes: 10,
        labels: Vec::new(),
    };
    let mut report = RunReport::new(
        "simulate",
        seed,
        json!({
            "model": model_path.display().to_string(),
            "days": days,
            "missing": missing,
        }),
    );
    for day in 0..days {
        let start = sim::default_start() + chrono::Duration::days(day as i64);
        let (states, seq) = sim::sample_sequence_from(
            &saved.params,
            slots_per_day,
            &rates,
            restart_seed(seed, day),
            start,
            Some(names.clone()),
        )?;
        let seq_name = format!("seq_{day:03}.csv");
        pipeline::write_sequence_csv(&shared.out.join(&seq_name), &seq, &saved.features)?;
        manifest.sequences.push(PathBuf::from(&seq_name));
        report.outputs.push(seq_name);
        if !saved.sleep_states.is_empty() {
            let labels = sim::binarize_states(&states, seq.timestamps(), &constraints)?;
            let label_name = format!("labels_{day:03}.csv");
            pipeline::write_labels_csv(&shared.out.join(&label_name), &labels)?;
            manifest.labels.push(PathBuf::from(&label_name));
            report.outputs.push(label_name);
        }
        report.per_sequence.push(SequenceMetrics {
            index: day,
            slots: slots_per_day,
            log_likelihood: None,
            metrics: None,
        });
    }
    manifest.save(&shared.out.join("manifest.json"))?;
    report.outputs.push("manifest.json".into());
    report.outputs.push("report.json".into());
    finish_report(report, &shared.out, started)
}
