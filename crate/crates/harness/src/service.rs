//! Annotation HTTP service for manual screening of mined windows.
//!
//! | Method | Path                  | Purpose                                   |
//! |--------|-----------------------|-------------------------------------------|
//! | GET    | `/api/windows`        | window list and dataset version           |
//! | GET    | `/api/windows/{id}`   | frames of one window with annotation state |
//! | GET    | `/media/{*path}`      | frame and mask files                      |
//! | POST   | `/api/annotations`    | append one annotation                     |
//! | GET    | `/api/progress`       | annotated / kept / discarded counts       |
//!
//! The service reads `windows.jsonl` and `samples.base.jsonl` once at start
//! and appends to `annotations.jsonl`. A POST is refused with 409 when those
//! files changed since start (the dataset was rebuilt) or when the client
//! sends a `dataset_version` other than the served one.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use lkaguard::dataset::{self, AlertSample, AnnotationRecord, Label};
use lkaguard::windowing::{EventKind, EventWindow};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use tokio::sync::Mutex;

use crate::pipeline::{io_err, PipelineError, ANNOTATIONS_FILE, BASE_SAMPLES_FILE, MEDIA_DIR, WINDOWS_FILE};

/// Hash of the files the service serves from.
pub fn dataset_version(root: &Path) -> Result<String, PipelineError> {
    let mut h = Sha256::new();
    for name in [WINDOWS_FILE, BASE_SAMPLES_FILE] {
        let path = root.join(name);
        h.update(fs::read(&path).map_err(io_err(&path))?);
    }
    Ok(hex::encode(h.finalize()))
}

struct Log {
    file: File,
    latest: HashMap<String, AnnotationRecord>,
    last_time: Option<DateTime<Utc>>,
}

pub struct AppState {
    root: PathBuf,
    version: String,
    windows: Vec<EventWindow>,
    samples: HashMap<String, AlertSample>,
    by_window: HashMap<String, Vec<String>>,
    log: Mutex<Log>,
}

impl AppState {
    /// Loads the dataset under `root` and replays the existing annotation log.
    pub fn load(root: &Path) -> Result<Arc<Self>, PipelineError> {
        let version = dataset_version(root)?;
        let windows: Vec<EventWindow> = dataset::read_jsonl(&root.join(WINDOWS_FILE))?;
        let samples: Vec<AlertSample> = dataset::read_jsonl(&root.join(BASE_SAMPLES_FILE))?;
        let log_path = root.join(ANNOTATIONS_FILE);
        let existing: Vec<AnnotationRecord> = if log_path.exists() { dataset::read_jsonl(&log_path)? } else { Vec::new() };

        let mut by_window: HashMap<String, Vec<String>> = HashMap::new();
        for s in &samples {
            by_window.entry(s.window_id().to_string()).or_default().push(s.sample_id.clone());
        }
        let mut latest: HashMap<String, AnnotationRecord> = HashMap::new();
        for a in existing {
            match latest.get(&a.sample_id) {
                Some(prev) if prev.annotated_at > a.annotated_at => {}
                _ => {
                    latest.insert(a.sample_id.clone(), a);
                }
            }
        }
        let last_time = latest.values().map(|a| a.annotated_at).max();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(io_err(&log_path))?;
        Ok(Arc::new(Self {
            root: root.to_path_buf(),
            version,
            windows,
            samples: samples.into_iter().map(|s| (s.sample_id.clone(), s)).collect(),
            by_window,
            log: Mutex::new(Log {
                file,
                latest,
                last_time,
            }),
        }))
    }

    pub fn version(&self) -> &str {
        &self.version
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/windows", get(list_windows))
        .route("/api/windows/{id}", get(window_detail))
        .route("/api/annotations", post(post_annotation))
        .route("/api/progress", get(progress))
        .route("/media/{*path}", get(media))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(root: &Path, bind: &str) -> Result<(), PipelineError> {
    let state = AppState::load(root)?;
    let listener = tokio::net::TcpListener::bind(bind)
        .await
        .map_err(io_err(Path::new(bind)))?;
    axum::serve(listener, router(state)).await.map_err(io_err(Path::new(bind)))
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn kind_name(kind: EventKind) -> &'static str {
    match kind {
        EventKind::Disengagement => "disengagement",
        EventKind::DeviationExceeded => "deviation_exceeded",
        EventKind::Normal => "normal",
    }
}

#[derive(Serialize)]
struct WindowSummary<'a> {
    window_id: String,
    source_id: &'a str,
    kind: &'static str,
    event_time: f64,
    event_frame_index: usize,
    frame_count: usize,
    annotated: usize,
}

async fn list_windows(State(st): State<Arc<AppState>>) -> Response {
    let log = st.log.lock().await;
    let windows: Vec<WindowSummary> = st
        .windows
        .iter()
        .map(|w| {
            let id = w.window_id();
            let ids = st.by_window.get(&id).map(Vec::as_slice).unwrap_or_default();
            WindowSummary {
                annotated: ids.iter().filter(|s| log.latest.contains_key(*s)).count(),
                frame_count: w.frame_times.len(),
                window_id: id,
                source_id: &w.source_id,
                kind: kind_name(w.event.kind),
                event_time: w.event.timestamp,
                event_frame_index: w.event_frame_index,
            }
        })
        .collect();
    Json(json!({ "dataset_version": st.version, "windows": windows })).into_response()
}

fn media_url(p: &Path) -> String {
    let rel = p.strip_prefix(MEDIA_DIR).unwrap_or(p);
    let parts: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
    format!("/media/{}", parts.join("/"))
}

async fn window_detail(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    let Some(w) = st.windows.iter().find(|w| w.window_id() == id) else {
        return error(StatusCode::NOT_FOUND, format!("unknown window `{id}`"));
    };
    let log = st.log.lock().await;
    let ids = st.by_window.get(&id).map(Vec::as_slice).unwrap_or_default();
    let frames: Vec<_> = ids
        .iter()
        .enumerate()
        .map(|(k, sid)| {
            let s = &st.samples[sid];
            let a = log.latest.get(sid);
            json!({
                "sample_id": s.sample_id,
                "frame_index": k + 1,
                "frame_time": s.frame_time,
                "image_url": media_url(&s.image_ref),
                "binary_mask_url": media_url(&s.binary_mask_ref),
                "instance_mask_url": media_url(&s.instance_mask_ref),
                "can_text": s.can_text,
                "label": a.map_or(s.label, |a| a.label),
                "explanation": a.map_or(s.explanation.as_str(), |a| a.explanation.as_str()),
                "keep": a.map(|a| a.keep),
                "annotated": a.is_some(),
            })
        })
        .collect();
    Json(json!({
        "window_id": id,
        "source_id": w.source_id,
        "kind": kind_name(w.event.kind),
        "event_time": w.event.timestamp,
        "event_frame_index": w.event_frame_index,
        "dataset_version": st.version,
        "frames": frames,
    }))
    .into_response()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationBody {
    sample_id: String,
    keep: bool,
    label: Label,
    #[serde(default)]
    explanation: String,
    #[serde(default)]
    annotator: String,
    #[serde(default)]
    dataset_version: Option<String>,
}

async fn post_annotation(State(st): State<Arc<AppState>>, body: Bytes) -> Response {
    let body: AnnotationBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("invalid annotation body: {e}")),
    };
    let explanation = body.explanation.trim().to_string();
    if body.keep && body.label == Label::Yes && explanation.is_empty() {
        return error(StatusCode::BAD_REQUEST, "a kept Yes annotation needs an explanation");
    }
    if !st.samples.contains_key(&body.sample_id) {
        return error(StatusCode::NOT_FOUND, format!("unknown sample `{}`", body.sample_id));
    }
    if body.dataset_version.as_deref().is_some_and(|v| v != st.version) {
        return error(StatusCode::CONFLICT, "annotation targets a different dataset version");
    }

    let mut log = st.log.lock().await;
    match dataset_version(&st.root) {
        Ok(v) if v == st.version => {}
        Ok(_) => return error(StatusCode::CONFLICT, "dataset was rebuilt; reload the service"),
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
    // Timestamps never go backwards, so log order and time order agree.
    let now = Utc::now();
    let annotated_at = log.last_time.map_or(now, |t| t.max(now));
    let record = AnnotationRecord {
        sample_id: body.sample_id,
        keep: body.keep,
        label: body.label,
        explanation: if body.label == Label::Yes { explanation } else { String::new() },
        annotator: body.annotator,
        annotated_at,
    };
    let mut line = serde_json::to_string(&record).expect("record serializes");
    line.push('\n');
    let written = log
        .file
        .write_all(line.as_bytes())
        .and_then(|_| log.file.sync_data());
    if let Err(e) = written {
        return error(StatusCode::INTERNAL_SERVER_ERROR, format!("annotation log: {e}"));
    }
    log.last_time = Some(annotated_at);
    log.latest.insert(record.sample_id.clone(), record.clone());
    (StatusCode::CREATED, Json(record)).into_response()
}

async fn progress(State(st): State<Arc<AppState>>) -> Response {
    let log = st.log.lock().await;
    let kept = log.latest.values().filter(|a| a.keep).count();
    let annotated = log.latest.len();
    Json(json!({
        "total": st.samples.len(),
        "annotated": annotated,
        "kept": kept,
        "discarded": annotated - kept,
        "pending": st.samples.len() - annotated,
    }))
    .into_response()
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => "image/x-portable-pixmap",
        Some("pgm") => "image/x-portable-graymap",
        Some("png") => "image/png",
        _ => "application/octet-stream",
    }
}

async fn media(State(st): State<Arc<AppState>>, UrlPath(path): UrlPath<String>) -> Response {
    let rel = Path::new(&path);
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return error(StatusCode::NOT_FOUND, "no such media file");
    }
    let full = st.root.join(MEDIA_DIR).join(rel);
    match tokio::fs::read(&full).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&full))], bytes).into_response(),
        Err(_) => error(StatusCode::NOT_FOUND, "no such media file"),
    }
}
