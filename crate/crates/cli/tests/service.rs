use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

use yolic_cli::commands::{run, Cli};
use yolic_cli::service::{router, AppState};
use yolic_cli::workspace::{LoadedModel, Workspace};
use yolic_core::cellgeom::{load_config, save_config};
use yolic_core::decode::{decode_cell, read_predictions};
use yolic_core::labelkit::{write_annotation, CellLabelVector};
use yolic_core::presets::{preset, preset_document};
use yolic_core::yolicnet::{build_model, save_weights, ModelSpec, WidthPreset, YolicModel};

use clap::Parser;

struct Fixture {
    _dir: tempfile::TempDir,
    ws: Workspace,
}

fn fixture(config: &str, count: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::open(dir.path()).unwrap();
    let count = count.to_string();
    let cli = Cli::parse_from(["yolic", "synth", "--config", config, "--count", &count, "--seed", "0"]);
    run(&ws, &cli.command).unwrap();
    Fixture { _dir: dir, ws }
}

fn tiny_model(config: &str) -> LoadedModel {
    let cfg = preset(config).unwrap().unwrap();
    let m: YolicModel<f32> = build_model(&ModelSpec::for_config(WidthPreset::Tiny, &cfg, 64), 11).unwrap();
    LoadedModel::from_bytes(&save_weights(&m, config)).unwrap()
}

fn app(f: &Fixture, model: Option<LoadedModel>) -> Router {
    router(AppState::new(f.ws.clone(), model))
}

struct Reply {
    status: StatusCode,
    etag: Option<String>,
    content_type: Option<String>,
    body: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap()
    }

    fn text(&self) -> String {
        String::from_utf8(self.body.clone()).unwrap()
    }
}

async fn send(app: &Router, method: Method, uri: &str, body: Vec<u8>, if_match: Option<&str>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(tag) = if_match {
        req = req.header(header::IF_MATCH, tag);
    }
    let resp = app.clone().oneshot(req.body(Body::from(body)).unwrap()).await.unwrap();
    let header_str = |h| resp.headers().get(h).map(|v: &header::HeaderValue| v.to_str().unwrap().to_string());
    let etag = header_str(header::ETAG);
    let content_type = header_str(header::CONTENT_TYPE);
    let status = resp.status();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply {
        status,
        etag,
        content_type,
        body,
    }
}

async fn get(app: &Router, uri: &str) -> Reply {
    send(app, Method::GET, uri, Vec::new(), None).await
}

#[tokio::test]
async fn config_round_trips_canonical_bytes() {
    let f = fixture("grid2x2", 1);
    let app = app(&f, None);
    let names = get(&app, "/api/configs").await.json();
    assert_eq!(names, serde_json::json!(["grid2x2"]));

    let cfg = load_config(preset_document("indoor30").unwrap().as_bytes()).unwrap();
    let bytes = save_config(&cfg);
    let put = send(&app, Method::PUT, "/api/configs/indoor30", bytes.clone(), None).await;
    assert_eq!(put.status, StatusCode::OK);
    assert_eq!(put.json()["n_outputs"], 210);
    let back = get(&app, "/api/configs/indoor30").await;
    assert_eq!(back.status, StatusCode::OK);
    assert_eq!(back.body, bytes);
    assert_eq!(back.etag, put.etag);
    assert!(back.content_type.unwrap().contains("yolic-config/1"));
}

#[tokio::test]
async fn invalid_config_is_rejected_with_violations() {
    let f = fixture("grid2x2", 1);
    let app = app(&f, None);
    let bowtie = br#"{"version": "yolic-config/1", "name": "bad", "ref_size": [224, 224], "classes": ["a"],
        "cells": [{"kind": "poly", "pts": [[0.1, 0.1], [0.9, 0.9], [0.9, 0.1], [0.1, 0.9]]}]}"#;
    let r = send(&app, Method::PUT, "/api/configs/bad", bowtie.to_vec(), None).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(r.json()["error"]["kind"], "validation");
    assert!(!r.json()["error"]["details"].as_array().unwrap().is_empty());

    let grid = preset_document("grid4x4").unwrap().as_bytes().to_vec();
    let r = send(&app, Method::PUT, "/api/configs/other", grid, None).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert!(get(&app, "/api/configs/bad").await.status == StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn layout_change_under_annotations_conflicts() {
    let f = fixture("grid2x2", 2);
    let app = app(&f, None);
    let mut doc: Value = serde_json::from_str(preset_document("grid2x2").unwrap()).unwrap();
    doc["classes"] = serde_json::json!(["object", "extra"]);
    let r = send(&app, Method::PUT, "/api/configs/grid2x2", doc.to_string().into_bytes(), None).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn images_and_masks_are_served_verbatim() {
    let f = fixture("grid2x2", 2);
    let app = app(&f, None);
    let list = get(&app, "/api/images").await.json();
    let items = list.as_array().unwrap();
    assert_eq!(items.len(), 2);
    assert_eq!(items[0]["has_annotation"], true);
    let id = items[0]["id"].as_str().unwrap();
    let img = get(&app, &format!("/api/images/{id}")).await;
    assert_eq!(img.body, std::fs::read(f.ws.image_path(id)).unwrap());
    let mask = get(&app, &format!("/api/images/{id}/mask")).await;
    assert_eq!(mask.body, std::fs::read(f.ws.mask_path(id)).unwrap());
    assert_eq!(get(&app, "/api/images/nope").await.status, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/api/annotations/nope").await.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn short_annotation_names_expected_count() {
    let f = fixture("indoor30", 1);
    let app = app(&f, None);
    let mut text = String::from("yolic-ann/1 30 6\n");
    for _ in 0..29 {
        text.push_str("0 0 0 0 0 0 1\n");
    }
    let r = send(&app, Method::PUT, "/api/annotations/indoor30-s0", text.into_bytes(), None).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    let msg = r.json()["error"]["message"].as_str().unwrap().to_string();
    assert!(msg.contains("expected 30"), "{msg}");
}

#[tokio::test]
async fn annotation_layout_mismatch_conflicts() {
    let f = fixture("grid2x2", 1);
    let app = app(&f, None);
    let other = write_annotation(&CellLabelVector::from_classes(2, &[vec![0], vec![], vec![1], vec![]]));
    let r = send(&app, Method::PUT, "/api/annotations/grid2x2-s0", other, None).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn annotation_versions_detect_races() {
    let f = fixture("grid2x2", 1);
    let app = app(&f, None);
    let uri = "/api/annotations/grid2x2-s0";
    let first = get(&app, uri).await;
    let tag = first.etag.clone().unwrap();

    let edit = write_annotation(&CellLabelVector::from_classes(1, &[vec![0], vec![0], vec![], vec![]]));
    let r = send(&app, Method::PUT, uri, edit.clone(), Some(&tag)).await;
    assert_eq!(r.status, StatusCode::OK);
    let new_tag = r.etag.clone().unwrap();
    assert_eq!(r.body, edit);

    // a second editor still holding the old version
    let other = write_annotation(&CellLabelVector::from_classes(1, &[vec![], vec![], vec![], vec![0]]));
    let stale = send(&app, Method::PUT, uri, other.clone(), Some(&tag)).await;
    assert_eq!(stale.status, StatusCode::CONFLICT);

    let now = get(&app, uri).await;
    assert_eq!(now.body, edit);
    assert_eq!(now.etag.as_deref(), Some(new_tag.as_str()));

    // without a version the write wins and the new version is echoed
    let r = send(&app, Method::PUT, uri, other.clone(), None).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_ne!(r.etag.unwrap(), new_tag);
}

#[tokio::test]
async fn infer_without_model_is_unavailable() {
    let f = fixture("grid2x2", 1);
    let app = app(&f, None);
    let r = send(&app, Method::POST, "/api/infer/grid2x2-s0", Vec::new(), None).await;
    assert_eq!(r.status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn infer_decisions_match_client_side_decode() {
    let f = fixture("grid4x4", 3);
    let app = app(&f, Some(tiny_model("grid4x4")));
    for theta in ["0.5", "0.3"] {
        let r = send(&app, Method::POST, &format!("/api/infer/grid4x4-s1?theta={theta}"), Vec::new(), None).await;
        assert_eq!(r.status, StatusCode::OK);
        assert!(r.content_type.as_deref().unwrap().contains("yolic-pred/1"));
        let (layout, th, preds) = read_predictions(&r.text()).unwrap();
        assert_eq!((layout.n_cells, layout.n_classes), (16, 3));
        assert_eq!(th, theta.parse::<f32>().unwrap());
        for p in &preds {
            let mut block = p.object_probs.clone();
            block.push(p.background_prob);
            let client = decode_cell(&block, th);
            assert_eq!(client.decided, p.decided);
            assert_eq!(client.is_background, p.is_background);
        }
    }
    let bad = send(&app, Method::POST, "/api/infer/grid4x4-s1?theta=2", Vec::new(), None).await;
    assert_eq!(bad.status, StatusCode::BAD_REQUEST);
    let missing = send(&app, Method::POST, "/api/infer/none", Vec::new(), None).await;
    assert_eq!(missing.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn infer_with_mismatched_model_conflicts() {
    let f = fixture("grid2x2", 1);
    let app = app(&f, Some(tiny_model("grid4x4")));
    let r = send(&app, Method::POST, "/api/infer/grid2x2-s0", Vec::new(), None).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn reports_are_listed_and_served() {
    let f = fixture("grid2x2", 1);
    let cli = Cli::parse_from(["yolic", "bench", "--cost-only"]);
    run(&f.ws, &cli.command).unwrap();
    let app = app(&f, None);
    let names = get(&app, "/api/reports").await.json();
    assert_eq!(names, serde_json::json!(["bench.json"]));
    let r = get(&app, "/api/reports/bench.json").await;
    assert_eq!(r.json()["cost"]["total_params"], 2_532_804);
    assert_eq!(get(&app, "/api/reports/..").await.status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn state_lives_on_disk() {
    let f = fixture("grid2x2", 1);
    let edit = write_annotation(&CellLabelVector::from_classes(1, &[vec![], vec![0], vec![], vec![]]));
    let first = app(&f, None);
    let r = send(&first, Method::PUT, "/api/annotations/grid2x2-s0", edit.clone(), None).await;
    assert_eq!(r.status, StatusCode::OK);
    drop(first);
    let restarted = app(&f, None);
    let again = get(&restarted, "/api/annotations/grid2x2-s0").await;
    assert_eq!(again.body, edit);
    assert_eq!(again.etag, r.etag);
}
