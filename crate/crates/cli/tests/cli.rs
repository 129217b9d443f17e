use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use geodiag::{AnalysisConfig, CheckpointMetrics, MetricsReport, RunAnalysis};
use serde_json::Value;
use tempfile::TempDir;

fn geodiag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geodiag"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = geodiag(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, checkpoints: usize, seed: u64) -> PathBuf {
    let out = dir.join("run");
    ok(&[
        "synth",
        "--out",
        s(&out),
        "--checkpoints",
        &checkpoints.to_string(),
        "--per-class",
        "40",
        "--seed",
        &seed.to_string(),
    ]);
    out.join("manifest.json")
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn checkpoint(id: &str, epoch: i64, tau: f64, kappa: f64) -> CheckpointMetrics {
    CheckpointMetrics {
        checkpoint_id: id.to_string(),
        epoch: Some(epoch),
        ood_accuracy: None,
        tau,
        mean_kappa: kappa,
        lambda2: 0.1,
        entropy: 1.0,
        heat_traces: Vec::new(),
        life0: None,
        life1: None,
        anisotropy: 0.5,
        feature_norm: 1.0,
        per_class: BTreeMap::new(),
        geoscore: None,
        skipped_classes: Vec::new(),
        subsample: Default::default(),
    }
}

fn write_report(path: &Path, mut checkpoints: Vec<CheckpointMetrics>) {
    if checkpoints.len() >= 2 {
        geodiag::diagnostics::geoscore(&mut checkpoints).unwrap();
    }
    let analysis = RunAnalysis {
        checkpoints,
        failures: Vec::new(),
    };
    MetricsReport::new(AnalysisConfig::default(), analysis)
        .save(path)
        .unwrap();
}

#[test]
fn analyze_writes_one_record_per_checkpoint_and_echoes_config() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path(), 5, 1);
    let metrics = dir.path().join("metrics.json");
    ok(&[
        "analyze",
        "--manifest",
        s(&manifest),
        "--out",
        s(&metrics),
        "--k",
        "5",
        "--layer-tag",
        "avgpool",
        "--no-topology",
    ]);
    let v = read_json(&metrics);
    assert_eq!(v["checkpoints"].as_array().unwrap().len(), 5);
    assert_eq!(v["config"]["k"], 5);
    assert_eq!(v["config"]["layer_tag"], "avgpool");
    assert_eq!(v["tool_version"], env!("CARGO_PKG_VERSION"));
}

#[test]
fn missing_embeddings_fail_only_that_checkpoint() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path(), 3, 2);
    fs::remove_file(dir.path().join("run/ckpt_001_embeddings.npy")).unwrap();
    let metrics = dir.path().join("metrics.json");
    let args = [
        "analyze",
        "--manifest",
        s(&manifest),
        "--out",
        s(&metrics),
        "--no-topology",
    ];
    let out = geodiag(&args);
    assert_eq!(out.status.code(), Some(0));
    let v = read_json(&metrics);
    assert_eq!(v["checkpoints"].as_array().unwrap().len(), 2);
    assert_eq!(v["failures"][0]["checkpoint_id"], "ckpt_001");

    let strict: Vec<&str> = ["--strict"].into_iter().chain(args).collect();
    assert_eq!(geodiag(&strict).status.code(), Some(2));
}

#[test]
fn analyze_fails_when_every_checkpoint_fails() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path(), 3, 3);
    for t in 0..3 {
        fs::remove_file(dir.path().join(format!("run/ckpt_{t:03}_labels.npy"))).unwrap();
    }
    let out = geodiag(&[
        "analyze",
        "--manifest",
        s(&manifest),
        "--out",
        s(&dir.path().join("m.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn rank_geoscore_selects_the_middle_checkpoint() {
    let dir = TempDir::new().unwrap();
    let metrics = dir.path().join("m.json");
    write_report(
        &metrics,
        vec![
            checkpoint("c1", 1, 2.0, 0.0),
            checkpoint("c2", 2, 0.0, 0.2),
            checkpoint("c3", 3, 1.0, 0.1),
        ],
    );
    let out = ok(&["rank", "--metrics", s(&metrics), "--criterion", "geoscore", "--json"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["ranking"][0]["checkpoint_id"], "c2");
    assert!((v["ranking"][0]["geoscore"].as_f64().unwrap() + 2.4495).abs() < 1e-3);
    assert_eq!(v["selections"][0]["selector"], "GeoScore");
    assert_eq!(v["selections"][0]["checkpoint_id"], "c2");

    let text = String::from_utf8(
        ok(&["rank", "--metrics", s(&metrics), "--criterion", "torsion-only"]).stdout,
    )
    .unwrap();
    let flagged: Vec<&str> = text.lines().filter(|l| l.starts_with("1*")).collect();
    assert_eq!(flagged.len(), 1);
    assert!(flagged[0].contains("c2"));
    let header = text.lines().find(|l| l.starts_with("Selector")).unwrap();
    assert_eq!(header.split_whitespace().collect::<Vec<_>>(), ["Selector", "Epoch", "Ckpt", "Acc"]);
}

#[test]
fn rank_rejects_empty_metrics_and_oracle_without_accuracy() {
    let dir = TempDir::new().unwrap();
    let empty = dir.path().join("empty.json");
    write_report(&empty, Vec::new());
    assert_eq!(geodiag(&["rank", "--metrics", s(&empty)]).status.code(), Some(2));

    let metrics = dir.path().join("m.json");
    write_report(
        &metrics,
        vec![checkpoint("a", 1, 1.0, 0.1), checkpoint("b", 2, 2.0, 0.2)],
    );
    let out = geodiag(&["rank", "--metrics", s(&metrics), "--criterion", "oracle"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("accuracy"));
}

fn five_checkpoints(dir: &Path) -> PathBuf {
    let metrics = dir.join("m.json");
    write_report(
        &metrics,
        (0..5)
            .map(|i| checkpoint(&format!("c{i}"), i, 5.0 - i as f64, 0.1 * i as f64))
            .collect(),
    );
    metrics
}

#[test]
fn correlate_needs_three_accuracy_rows() {
    let dir = TempDir::new().unwrap();
    let metrics = five_checkpoints(dir.path());
    let acc = dir.path().join("acc.csv");
    fs::write(&acc, "checkpoint_id,ood_accuracy\nc0,0.1\nc1,0.2\n").unwrap();
    let out = geodiag(&["correlate", "--metrics", s(&metrics), "--accuracy", s(&acc)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn correlate_warns_about_unknown_ids() {
    let dir = TempDir::new().unwrap();
    let metrics = five_checkpoints(dir.path());
    let acc = dir.path().join("acc.csv");
    let mut csv = String::from("checkpoint_id,ood_accuracy\n");
    for i in 0..5 {
        csv.push_str(&format!("c{i},{}\n", 0.5 + 0.1 * i as f64));
    }
    csv.push_str("ghost_ckpt,0.9\n");
    fs::write(&acc, csv).unwrap();
    let out = ok(&[
        "correlate",
        "--metrics",
        s(&metrics),
        "--accuracy",
        s(&acc),
        "--json",
    ]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("ghost_ckpt"));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let rows = v["rows"].as_array().unwrap();
    let rho = |name: &str| {
        rows.iter()
            .find(|r| r["metric_name"] == name)
            .unwrap()["rho"]
            .as_f64()
            .unwrap()
    };
    assert_eq!(rho("tau"), -1.0);
    assert_eq!(rho("mean_kappa"), 1.0);
}

#[test]
fn synth_analyze_correlate_end_to_end() {
    let dir = TempDir::new().unwrap();
    let run = dir.path().join("run");
    ok(&["synth", "--out", s(&run), "--checkpoints", "10", "--seed", "7"]);
    let metrics = dir.path().join("metrics.json");
    ok(&[
        "analyze",
        "--manifest",
        s(&run.join("manifest.json")),
        "--out",
        s(&metrics),
        "--subsample",
        "200",
    ]);
    let out = ok(&["correlate", "--metrics", s(&metrics), "--json"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let names: Vec<&str> = v["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["metric_name"].as_str().unwrap())
        .collect();
    for want in ["tau", "mean_kappa", "lambda2", "entropy", "life0", "life1", "anisotropy", "feature_norm", "geoscore"] {
        assert!(names.contains(&want), "missing row {want}: {names:?}");
    }
    assert!(names.iter().any(|n| n.starts_with("heat_trace_t")));

    let plot = dir.path().join("plot.csv");
    ok(&["plot-data", "--metrics", s(&metrics), "--out", s(&plot)]);
    let text = fs::read_to_string(&plot).unwrap();
    assert!(text.starts_with("checkpoint_id,x,y,color\n"));
    assert_eq!(text.lines().count(), 11);
}

/// Coherence is a perfectly monotone target, so each checkpoint's torsion and
/// curvature should be ordered exactly along it.
#[test]
fn monotone_synthetic_run_gives_perfect_rank_correlation() {
    let dir = TempDir::new().unwrap();
    let run = dir.path().join("run");
    ok(&["synth", "--out", s(&run), "--checkpoints", "10", "--seed", "7"]);
    let metrics = dir.path().join("metrics.json");
    ok(&[
        "analyze",
        "--manifest",
        s(&run.join("manifest.json")),
        "--out",
        s(&metrics),
        "--subsample",
        "200",
        "--no-topology",
    ]);
    let out = ok(&["correlate", "--metrics", s(&metrics), "--json"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let rho = |name: &str| {
        v["rows"]
            .as_array()
            .unwrap()
            .iter()
            .find(|r| r["metric_name"] == name)
            .unwrap()["rho"]
            .as_f64()
            .unwrap()
    };
    let (tau, kappa) = (rho("tau"), rho("mean_kappa"));
    eprintln!("rho(tau) = {tau:.4}, rho(kappa) = {kappa:.4}");
    assert_eq!(tau, -1.0);
    assert_eq!(kappa, 1.0);
}

#[test]
fn controls_label_shuffle_and_rotate() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path(), 5, 4);
    let out = ok(&[
        "controls",
        "--manifest",
        s(&manifest),
        "--control",
        "label-shuffle,rotate",
        "--k",
        "5",
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("Control"));
    assert!(text.contains("RhoOriginal") && text.contains("RhoControl"));

    let json = dir.path().join("controls.json");
    ok(&[
        "controls",
        "--manifest",
        s(&manifest),
        "--control",
        "label-shuffle,rotate",
        "--k",
        "5",
        "--json",
        "--out",
        s(&json),
    ]);
    let rows = read_json(&json);
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 4);
    for r in rows.iter().filter(|r| r["control"] == "rotate") {
        let d = r["rho_original"].as_f64().unwrap() - r["rho_control"].as_f64().unwrap();
        assert!(d.abs() <= 0.05, "{r}");
    }

    let csv = dir.path().join("controls.csv");
    ok(&[
        "controls",
        "--manifest",
        s(&manifest),
        "--control",
        "identity",
        "--k",
        "5",
        "--out",
        s(&csv),
    ]);
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("control,metric,rho_original,rho_control\n"));
}

#[test]
fn unknown_control_is_an_error() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path(), 3, 5);
    let out = geodiag(&["controls", "--manifest", s(&manifest), "--control", "jiggle"]);
    assert_eq!(out.status.code(), Some(2));
}
