//! Local HTTP service over a workspace. Payloads are the file formats
//! verbatim; validation reuses the same functions as the CLI.

use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use tokio::sync::Mutex;

use yolic_core::cellgeom::save_config;
use yolic_core::decode::{write_predictions, DEFAULT_THETA};
use yolic_core::labelkit::write_annotation;

use crate::commands::{check_head, predict_one};
use crate::diag::{ToolError, ToolResult};
use crate::workspace::{check_id, etag, parse_annotation, parse_config, write_atomic, LoadedModel, Workspace};

pub const CONFIG_CONTENT_TYPE: &str = "application/json; profile=\"yolic-config/1\"";
pub const ANNOTATION_CONTENT_TYPE: &str = "text/plain; profile=\"yolic-ann/1\"";
pub const PREDICTION_CONTENT_TYPE: &str = "text/plain; profile=\"yolic-pred/1\"";

pub struct AppState {
    pub ws: Workspace,
    pub model: Option<Arc<LoadedModel>>,
    /// Serializes writes so the version check and the write are atomic.
    write_lock: Mutex<()>,
}

impl AppState {
    pub fn new(ws: Workspace, model: Option<LoadedModel>) -> Arc<Self> {
        Arc::new(Self {
            ws,
            model: model.map(Arc::new),
            write_lock: Mutex::new(()),
        })
    }
}

impl IntoResponse for ToolError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, [(header::CONTENT_TYPE, "application/json")], self.to_json()).into_response()
    }
}

type ApiResult = Result<Response, ToolError>;

fn body(content_type: &'static str, bytes: Vec<u8>, tag: Option<String>) -> Response {
    let mut resp = ([(header::CONTENT_TYPE, content_type)], bytes).into_response();
    if let Some(t) = tag.and_then(|t| HeaderValue::from_str(&t).ok()) {
        resp.headers_mut().insert(header::ETAG, t);
    }
    resp
}

/// Rejects the write when `If-Match` names a version other than the current one.
fn check_version(headers: &HeaderMap, current: Option<&[u8]>) -> ToolResult<()> {
    let Some(want) = headers.get(header::IF_MATCH) else {
        return Ok(());
    };
    let want = want.to_str().map_err(|_| ToolError::validation("If-Match is not ASCII"))?.trim();
    if want == "*" && current.is_some() {
        return Ok(());
    }
    let have = current.map(etag);
    if have.as_deref() != Some(want) {
        return Err(ToolError::conflict(format!(
            "version conflict: If-Match {want}, current {}",
            have.unwrap_or_else(|| "none".into())
        )));
    }
    Ok(())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/configs", get(list_configs))
        .route("/api/configs/{name}", get(get_config).put(put_config))
        .route("/api/images", get(list_images))
        .route("/api/images/{id}", get(get_image))
        .route("/api/images/{id}/mask", get(get_mask))
        .route("/api/annotations/{id}", get(get_annotation).put(put_annotation))
        .route("/api/infer/{id}", post(infer))
        .route("/api/reports", get(list_reports))
        .route("/api/reports/{name}", get(get_report))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: &str) -> ToolResult<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| ToolError::io(format!("bind {addr}: {e}")))?;
    axum::serve(listener, router(state))
        .await
        .map_err(|e| ToolError::io(e.to_string()))
}

async fn list_configs(State(s): State<Arc<AppState>>) -> ApiResult {
    Ok(Json(s.ws.config_names()?).into_response())
}

async fn get_config(State(s): State<Arc<AppState>>, Path(name): Path<String>) -> ApiResult {
    let bytes = s.ws.config_bytes(&name)?;
    let tag = etag(&bytes);
    Ok(body(CONFIG_CONTENT_TYPE, bytes, Some(tag)))
}

#[derive(Serialize)]
struct ConfigSummary {
    name: String,
    n_cells: usize,
    n_classes: usize,
    n_outputs: usize,
    violations: usize,
}

async fn put_config(State(s): State<Arc<AppState>>, Path(name): Path<String>, headers: HeaderMap, payload: Bytes) -> ApiResult {
    check_id(&name)?;
    let cfg = parse_config(&payload)?;
    if cfg.name() != name {
        return Err(ToolError::validation(format!(
            "document names config {:?} but the path names {name:?}",
            cfg.name()
        )));
    }
    let _guard = s.write_lock.lock().await;
    let path = s.ws.config_path(&name);
    let current = std::fs::read(&path).ok();
    check_version(&headers, current.as_deref())?;
    if let Some(old) = current.as_deref() {
        let old = parse_config(old)?;
        let annotated = s
            .ws
            .images_for(&name, &[])?
            .iter()
            .any(|e| s.ws.annotation_path(&e.id).is_file());
        if annotated && old.layout() != cfg.layout() {
            return Err(ToolError::conflict(format!(
                "config {name} has annotated images with layout {}x{}; the new layout is {}x{}",
                old.n_cells(),
                old.n_classes(),
                cfg.n_cells(),
                cfg.n_classes()
            )));
        }
    }
    let bytes = save_config(&cfg);
    write_atomic(&path, &bytes)?;
    let mut resp = Json(ConfigSummary {
        name,
        n_cells: cfg.n_cells(),
        n_classes: cfg.n_classes(),
        n_outputs: cfg.n_outputs(),
        violations: 0,
    })
    .into_response();
    if let Ok(v) = HeaderValue::from_str(&etag(&bytes)) {
        resp.headers_mut().insert(header::ETAG, v);
    }
    Ok(resp)
}

#[derive(Serialize)]
struct ImageInfo {
    id: String,
    config: String,
    has_mask: bool,
    has_annotation: bool,
}

async fn list_images(State(s): State<Arc<AppState>>) -> ApiResult {
    let list: Vec<ImageInfo> = s
        .ws
        .manifest()?
        .images
        .into_iter()
        .map(|e| ImageInfo {
            has_mask: s.ws.mask_path(&e.id).is_file(),
            has_annotation: s.ws.annotation_path(&e.id).is_file(),
            id: e.id,
            config: e.config,
        })
        .collect();
    Ok(Json(list).into_response())
}

fn read_file(path: &std::path::Path, what: String) -> ToolResult<Vec<u8>> {
    std::fs::read(path).map_err(|_| ToolError::not_found(what))
}

async fn get_image(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    s.ws.entry(&id)?;
    let bytes = read_file(&s.ws.image_path(&id), format!("image {id:?} has no image file"))?;
    Ok(body("image/x-portable-pixmap", bytes, None))
}

async fn get_mask(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    s.ws.entry(&id)?;
    let bytes = read_file(&s.ws.mask_path(&id), format!("image {id:?} has no mask"))?;
    Ok(body("image/x-portable-graymap", bytes, None))
}

async fn get_annotation(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    s.ws.entry(&id)?;
    let bytes = read_file(&s.ws.annotation_path(&id), format!("image {id:?} has no annotation"))?;
    let tag = etag(&bytes);
    Ok(body(ANNOTATION_CONTENT_TYPE, bytes, Some(tag)))
}

async fn put_annotation(State(s): State<Arc<AppState>>, Path(id): Path<String>, headers: HeaderMap, payload: Bytes) -> ApiResult {
    let entry = s.ws.entry(&id)?;
    let cfg = s.ws.resolve_config(&entry.config)?;
    let labels = parse_annotation(&payload, &cfg)?;
    let _guard = s.write_lock.lock().await;
    let path = s.ws.annotation_path(&id);
    let current = std::fs::read(&path).ok();
    check_version(&headers, current.as_deref())?;
    let bytes = write_annotation(&labels);
    write_atomic(&path, &bytes)?;
    let tag = etag(&bytes);
    Ok(body(ANNOTATION_CONTENT_TYPE, bytes, Some(tag)))
}

async fn infer(State(s): State<Arc<AppState>>, Path(id): Path<String>, Query(q): Query<HashMap<String, String>>) -> ApiResult {
    let theta = match q.get("theta") {
        Some(t) => t
            .parse::<f32>()
            .ok()
            .filter(|t| (0.0..=1.0).contains(t))
            .ok_or_else(|| ToolError::validation(format!("theta {t:?} is not a number in [0, 1]")))?,
        None => DEFAULT_THETA,
    };
    let model = s.model.clone().ok_or_else(|| ToolError::unavailable("no model loaded; start serve with --weights"))?;
    let entry = s.ws.entry(&id)?;
    let cfg = s.ws.resolve_config(&entry.config)?;
    if model.config_name() != entry.config {
        return Err(ToolError::conflict(format!(
            "model was trained for config {}, image {id} uses {}",
            model.config_name(),
            entry.config
        )));
    }
    check_head(&model, &cfg)?;
    let state = s.clone();
    let preds = tokio::task::spawn_blocking(move || predict_one(&state.ws, &model, &cfg, &id, theta))
        .await
        .map_err(|e| ToolError::io(e.to_string()))??;
    Ok(body(PREDICTION_CONTENT_TYPE, write_predictions(&preds, theta).into_bytes(), None))
}

async fn list_reports(State(s): State<Arc<AppState>>) -> ApiResult {
    let mut names: Vec<String> = std::fs::read_dir(s.ws.reports_dir())?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .filter_map(|e| e.file_name().to_str().map(String::from))
        .filter(|n| !n.ends_with(".tmp"))
        .collect();
    names.sort();
    Ok(Json(names).into_response())
}

async fn get_report(State(s): State<Arc<AppState>>, Path(name): Path<String>) -> ApiResult {
    check_id(&name)?;
    let bytes = read_file(&s.ws.reports_dir().join(&name), format!("unknown report {name:?}"))?;
    let ct = if name.ends_with(".json") { "application/json" } else { "text/plain" };
    Ok(body(ct, bytes, None))
}
