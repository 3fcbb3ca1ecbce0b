use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

use yolic_core::cellgeom::load_config;
use yolic_core::decode::{labels_to_predictions, write_predictions};
use yolic_core::labelkit::read_annotation;
use yolic_core::presets::preset;

fn yolic(ws: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_yolic"))
        .arg("--workspace")
        .arg(ws)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(ws: &Path, args: &[&str]) -> String {
    let out = yolic(ws, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn diagnostic(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().rev().find(|l| l.starts_with('{')).expect("json diagnostic");
    serde_json::from_str(line).unwrap()
}

#[test]
fn validate_echoes_outdoor_layout() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), &["config", "validate", "outdoor104"]);
    assert!(text.contains("N=104"), "{text}");
    assert!(text.contains("C=1248"), "{text}");
    assert!(text.contains("0 violations"));
}

#[test]
fn invalid_config_reports_violations() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bowtie.json");
    std::fs::write(
        &path,
        r#"{"version": "yolic-config/1", "name": "bowtie", "ref_size": [224, 224], "classes": ["a"],
            "cells": [{"kind": "poly", "pts": [[0.1, 0.1], [0.9, 0.9], [0.9, 0.1], [0.1, 0.9]]}]}"#,
    )
    .unwrap();
    let out = yolic(dir.path(), &["config", "validate", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let d = diagnostic(&out);
    assert_eq!(d["error"]["kind"], "validation");
    assert!(!d["error"]["details"].as_array().unwrap().is_empty());
}

#[test]
fn unknown_config_is_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let out = yolic(dir.path(), &["config", "validate", "no-such-config"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(diagnostic(&out)["error"]["kind"], "not_found");
}

#[test]
fn mirror_prints_permutation_and_writes_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.json");
    let text = ok(dir.path(), &["config", "mirror", "grid2x2", "--out", out.to_str().unwrap()]);
    assert!(text.contains("[1, 0, 3, 2]"), "{text}");
    let mirrored = load_config(&std::fs::read(out).unwrap()).unwrap();
    assert_eq!(mirrored.n_cells(), 4);
}

#[test]
fn rasterize_writes_cell_map() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cells.pgm");
    let text = ok(
        dir.path(),
        &["rasterize", "grid2x2", "--width", "8", "--height", "8", "--out", out.to_str().unwrap()],
    );
    assert_eq!(text.matches(": 16 px").count(), 4, "{text}");
    let (w, h, ids) = yolic_core::imageio::decode_pgm(&std::fs::read(out).unwrap()).unwrap();
    assert_eq!((w, h), (8, 8));
    assert_eq!(ids[0], 0);
    assert_eq!(ids[63], 3);
}

#[test]
fn synth_then_train_overfits() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path();
    ok(ws, &["synth", "--config", "grid2x2", "--count", "8", "--seed", "7"]);
    ok(ws, &["train", "--steps", "200"]);
    let trace: Value = serde_json::from_slice(&std::fs::read(ws.join("reports/train-grid2x2.json")).unwrap()).unwrap();
    let losses: Vec<f64> = trace["report"]["step_losses"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(losses.len(), 200);
    assert!(losses[199] < 0.05 * losses[0], "{} -> {}", losses[0], losses[199]);

    let weights = ws.join("weights/grid2x2.yw");
    let text = ok(ws, &["infer", "--weights", weights.to_str().unwrap()]);
    assert!(text.contains("wrote 8 prediction file(s)"), "{text}");
    let report = ok(ws, &["eval"]);
    assert!(report.contains("Risk"), "{report}");
    let q = ok(ws, &["quantize", "--weights", weights.to_str().unwrap()]);
    assert!(q.contains("decode agreement on 8"), "{q}");
    assert!(ws.join("weights/grid2x2.q8").is_file());
    let qtext = ok(ws, &["infer", "--weights", ws.join("weights/grid2x2.q8").to_str().unwrap()]);
    assert!(qtext.contains("wrote 8"));
}

#[test]
fn eval_of_ground_truth_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path();
    ok(ws, &["synth", "--config", "grid4x4", "--count", "16", "--seed", "3"]);
    let cfg = preset("grid4x4").unwrap().unwrap();
    std::fs::create_dir_all(ws.join("reports/predictions")).unwrap();
    for i in 3..19 {
        let id = format!("grid4x4-s{i}");
        let labels = read_annotation(&std::fs::read(ws.join(format!("annotations/{id}.ann"))).unwrap(), cfg.layout()).unwrap();
        let preds = labels_to_predictions(&labels);
        std::fs::write(ws.join(format!("reports/predictions/{id}.pred")), write_predictions(&preds, 0.5)).unwrap();
    }
    ok(ws, &["eval"]);
    let m: Value = serde_json::from_slice(&std::fs::read(ws.join("reports/metrics-grid4x4.json")).unwrap()).unwrap();
    let mut f1s = vec![m["all"]["f1"].as_f64().unwrap(), m["binary"]["all"]["f1"].as_f64().unwrap()];
    for row in m["classes"].as_array().unwrap() {
        f1s.push(row["metrics"]["f1"].as_f64().unwrap());
    }
    for key in ["risk", "road"] {
        f1s.push(m["binary"][key]["metrics"]["f1"].as_f64().unwrap());
    }
    assert_eq!(f1s.len(), 7);
    assert!(f1s.iter().all(|&f| f == 1.0), "{f1s:?}");
}

#[test]
fn short_annotation_is_rejected_with_expected_count() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path();
    ok(ws, &["synth", "--config", "indoor30", "--count", "1", "--seed", "0"]);
    let path = ws.join("annotations/indoor30-s0.ann");
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 31);
    std::fs::write(&path, lines[..30].join("\n")).unwrap();
    let out = yolic(ws, &["train", "--steps", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let d = diagnostic(&out);
    assert!(d["error"]["message"].as_str().unwrap().contains("expected 30"), "{d}");
}

#[test]
fn convert_regenerates_annotations_from_masks() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path();
    ok(ws, &["synth", "--config", "grid4x4", "--count", "3", "--seed", "1"]);
    let path = ws.join("annotations/grid4x4-s2.ann");
    let original = std::fs::read(&path).unwrap();
    std::fs::remove_file(&path).unwrap();
    let text = ok(ws, &["convert"]);
    assert!(text.contains("converted 3"), "{text}");
    assert_eq!(std::fs::read(&path).unwrap(), original);
}

#[test]
fn bench_cost_only_reports_table1_counts() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), &["bench", "--cost-only"]);
    assert!(text.contains("C=1248"), "{text}");
    assert!(text.contains("total params 2532804"), "{text}");
    let doc: Value = serde_json::from_slice(&std::fs::read(dir.path().join("reports/bench.json")).unwrap()).unwrap();
    assert!(doc["latency"].is_null());
}

#[test]
fn bench_times_tiny_model() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(
        dir.path(),
        &["bench", "--preset", "tiny", "--config", "grid2x2", "--size", "64", "--runs", "5", "--warmup", "2"],
    );
    assert!(text.contains("median"), "{text}");
    let out = yolic(dir.path(), &["bench", "--preset", "tiny", "--config", "grid2x2", "--runs", "2"]);
    assert_eq!(out.status.code(), Some(2));
}
