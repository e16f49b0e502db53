//! Subcommand-level tests against the compiled binary.

mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Output};

use ndarray::array;

use hhmm::model::{ClampEntry, GaussianParams, ModelParameters};
use hhmm::pipeline::{load_model, save_model, FeatureSpec, SavedModel};

fn hhmm_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hhmm"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = hhmm_bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "command {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(args: &[&str]) -> (i32, String) {
    let out = hhmm_bin().args(args).output().expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

/// Two-state truth over the four sensor features. State 1 is the sleep
/// state: low activity, no app usage.
fn sensor_truth() -> SavedModel {
    SavedModel {
        params: ModelParameters::new(
            array![0.5, 0.5],
            array![[0.92, 0.08], [0.06, 0.94]],
            vec![
                GaussianParams {
                    mean: array![4.0, 3.0],
                    cov: array![[1.0, 0.2], [0.2, 1.0]],
                },
                GaussianParams {
                    mean: array![-2.0, -3.0],
                    cov: array![[1.0, -0.1], [-0.1, 1.0]],
                },
            ],
            vec![
                vec![array![0.55, 0.45], array![0.5, 0.5]],
                vec![array![0.95, 0.05], array![1.0, 0.0]],
            ],
            vec![ClampEntry {
                state: 1,
                feature: 1,
                category: 1,
                prob: 0.0,
            }],
        )
        .unwrap(),
        features: vec![
            FeatureSpec::continuous("actigraphy"),
            FeatureSpec::continuous("light"),
            FeatureSpec::binary("steps"),
            FeatureSpec::binary("app_usage"),
        ],
        sleep_states: BTreeSet::from([1]),
    }
}

fn report_json(dir: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join("report.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn simulate_train_infer_evaluate_pipeline() {
    let root = tempfile::tempdir().unwrap();
    let truth_path = root.path().join("truth_model.json");
    save_model(&truth_path, &sensor_truth()).unwrap();

    // Simulate a small labeled cohort.
    let sim_dir = root.path().join("sim");
    run_ok(&[
        "simulate",
        "--model",
        truth_path.to_str().unwrap(),
        "--days",
        "6",
        "--missing",
        "actigraphy=0.26,light=0.59,steps=0.22,app_usage=0.05",
        "--seed",
        "4",
        "--out",
        sim_dir.to_str().unwrap(),
    ]);
    let manifest_path = sim_dir.join("manifest.json");
    assert!(manifest_path.exists());
    assert!(sim_dir.join("seq_000.csv").exists());
    assert!(sim_dir.join("labels_000.csv").exists());

    // Train with the paper-style clamp on the designated sleep state.
    let config_path = root.path().join("config.json");
    std::fs::write(
        &config_path,
        r#"{"fit": {"restarts": 2, "max_iterations": 60, "tolerance": 1e-5}}"#,
    )
    .unwrap();
    let train_dir = root.path().join("train");
    run_ok(&[
        "train",
        "--manifest",
        manifest_path.to_str().unwrap(),
        "--states",
        "2",
        "--clamp",
        "state=1,feature=app_usage,value=1,prob=0",
        "--sleep-states",
        "1",
        "--seed",
        "11",
        "--config",
        config_path.to_str().unwrap(),
        "--out",
        train_dir.to_str().unwrap(),
    ]);
    let trained = load_model(&train_dir.join("model.json")).unwrap();
    assert_eq!(trained.params.discretes[1][1][1], 0.0);
    assert_eq!(trained.sleep_states, BTreeSet::from([1]));
    let report = report_json(&train_dir);
    assert_eq!(report["command"], "train");
    assert!(report["extra"]["converged"].as_bool().is_some());

    // Decode and compare against the wearable-style labels.
    let infer_dir = root.path().join("infer");
    run_ok(&[
        "infer",
        "--manifest",
        manifest_path.to_str().unwrap(),
        "--model",
        train_dir.join("model.json").to_str().unwrap(),
        "--out",
        infer_dir.to_str().unwrap(),
    ]);
    assert!(infer_dir.join("pred_000.csv").exists());
    assert!(infer_dir.join("plot_000.csv").exists());

    let eval_dir = root.path().join("eval");
    run_ok(&[
        "evaluate",
        "--pred",
        infer_dir.join("pred_000.csv").to_str().unwrap(),
        "--truth",
        sim_dir.join("labels_000.csv").to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    let report = report_json(&eval_dir);
    let accuracy = report["aggregate"]["pooled"]["accuracy"].as_f64().unwrap();
    assert!(
        accuracy > 0.85,
        "end-to-end accuracy too low: {accuracy} ({report})"
    );
}

#[test]
fn evaluate_pred_equals_truth_is_perfect() {
    let root = tempfile::tempdir().unwrap();
    let labels = root.path().join("labels.csv");
    std::fs::write(
        &labels,
        "timestamp,stage\n\
         2024-03-01T00:00:00Z,awake\n\
         2024-03-01T00:10:00Z,light\n\
         2024-03-01T00:20:00Z,rem\n",
    )
    .unwrap();
    let out = root.path().join("out");
    run_ok(&[
        "evaluate",
        "--pred",
        labels.to_str().unwrap(),
        "--truth",
        labels.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let report = report_json(&out);
    assert_eq!(report["aggregate"]["pooled"]["accuracy"].as_f64(), Some(1.0));
    assert_eq!(report["aggregate"]["pooled"]["sensitivity"].as_f64(), Some(1.0));
}

#[test]
fn baseline_most_frequent_probes_the_label_distribution() {
    let root = tempfile::tempdir().unwrap();
    // 100 slots, 68% awake; a flat data file over the same span.
    let mut data = String::from("timestamp,actigraphy,light,steps,app_usage\n");
    let mut labels = String::from("timestamp,stage\n");
    for t in 0..100 {
        let h = t / 6;
        let m = (t % 6) * 10;
        let ts = format!("2024-03-01T{h:02}:{m:02}:00Z");
        data.push_str(&format!("{ts},1.0,1.0,0,0\n"));
        let stage = if t < 68 { "awake" } else { "deep" };
        labels.push_str(&format!("{ts},{stage}\n"));
    }
    std::fs::write(root.path().join("data.csv"), data).unwrap();
    std::fs::write(root.path().join("labels.csv"), labels).unwrap();
    let manifest = serde_json::json!({
        "sequences": ["data.csv"],
        "labels": ["labels.csv"],
        "features": [
            {"name": "actigraphy", "kind": "continuous"},
            {"name": "light", "kind": "continuous"},
            {"name": "steps", "kind": "binary"},
            {"name": "app_usage", "kind": "binary"},
        ],
        "slot_minutes": 10,
    });
    let manifest_path = root.path().join("manifest.json");
    std::fs::write(&manifest_path, manifest.to_string()).unwrap();

    let out = root.path().join("out");
    run_ok(&[
        "baseline",
        "--manifest",
        manifest_path.to_str().unwrap(),
        "--method",
        "most_frequent",
        "--out",
        out.to_str().unwrap(),
    ]);
    let report = report_json(&out);
    let pooled = &report["aggregate"]["pooled"];
    let accuracy = pooled["accuracy"].as_f64().unwrap();
    assert!((accuracy - 0.68).abs() < 1e-9, "accuracy {accuracy}");
    assert_eq!(pooled["sensitivity"].as_f64(), Some(0.0));
    assert_eq!(pooled["specificity"].as_f64(), Some(1.0));
}

#[test]
fn train_never_reads_label_files() {
    let root = tempfile::tempdir().unwrap();
    let truth_path = root.path().join("truth_model.json");
    save_model(&truth_path, &sensor_truth()).unwrap();
    let sim_dir = root.path().join("sim");
    run_ok(&[
        "simulate",
        "--model",
        truth_path.to_str().unwrap(),
        "--days",
        "2",
        "--seed",
        "1",
        "--out",
        sim_dir.to_str().unwrap(),
    ]);
    // Point the manifest at a label file that does not exist: training must
    // not notice.
    let manifest_path = sim_dir.join("manifest.json");
    let mut manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&manifest_path).unwrap()).unwrap();
    manifest["labels"] = serde_json::json!(["no_such_labels.csv"]);
    std::fs::write(&manifest_path, manifest.to_string()).unwrap();

    let config_path = root.path().join("config.json");
    std::fs::write(
        &config_path,
        r#"{"fit": {"restarts": 1, "max_iterations": 10}}"#,
    )
    .unwrap();
    let out = root.path().join("out");
    run_ok(&[
        "train",
        "--manifest",
        manifest_path.to_str().unwrap(),
        "--states",
        "2",
        "--config",
        config_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
}

#[test]
fn error_exit_codes() {
    let root = tempfile::tempdir().unwrap();
    let out_dir = root.path().join("out");

    // Usage error: clap-level missing arguments.
    let (code, _) = exit_code(&["train", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code, 2);

    // Data error: manifest does not exist.
    let (code, stderr) = exit_code(&[
        "train",
        "--manifest",
        root.path().join("nope.json").to_str().unwrap(),
        "--states",
        "2",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 3, "stderr: {stderr}");
    let err: serde_json::Value = serde_json::from_str(stderr.trim()).expect("machine readable");
    assert_eq!(err["exit_code"], 3);

    // Usage error from a malformed clamp spec.
    let truth_path = root.path().join("truth_model.json");
    save_model(&truth_path, &sensor_truth()).unwrap();
    let sim_dir = root.path().join("sim");
    run_ok(&[
        "simulate",
        "--model",
        truth_path.to_str().unwrap(),
        "--days",
        "1",
        "--out",
        sim_dir.to_str().unwrap(),
    ]);
    let (code, stderr) = exit_code(&[
        "train",
        "--manifest",
        sim_dir.join("manifest.json").to_str().unwrap(),
        "--states",
        "2",
        "--clamp",
        "bogus",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 2, "stderr: {stderr}");
}

#[test]
fn select_writes_the_selection_table() {
    let root = tempfile::tempdir().unwrap();
    let truth_path = root.path().join("truth_model.json");
    save_model(&truth_path, &sensor_truth()).unwrap();
    let sim_dir = root.path().join("sim");
    run_ok(&[
        "simulate",
        "--model",
        truth_path.to_str().unwrap(),
        "--days",
        "3",
        "--seed",
        "2",
        "--out",
        sim_dir.to_str().unwrap(),
    ]);
    let config_path = root.path().join("config.json");
    std::fs::write(
        &config_path,
        r#"{"fit": {"restarts": 1, "max_iterations": 15, "tolerance": 1e-4}}"#,
    )
    .unwrap();
    let out = root.path().join("out");
    run_ok(&[
        "select",
        "--manifest",
        sim_dir.join("manifest.json").to_str().unwrap(),
        "--states-range",
        "1..3",
        "--config",
        config_path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let table = std::fs::read_to_string(out.join("selection.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("I,loglik,k,bic,aic"));
    assert_eq!(table.lines().count(), 4);
    assert!(out.join("selection_plot.csv").exists());
    let report = report_json(&out);
    let chosen = report["extra"]["chosen"].as_u64().unwrap();
    assert!((1..=3).contains(&chosen), "chosen {chosen}");
}
