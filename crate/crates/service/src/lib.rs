//! HTTP front end for interactive editing.
//!
//! Three endpoints: `POST /api/edit`, `GET /api/health` and `GET /api/config`.
//! The model is loaded once and shared read-only by every request; inference
//! runs on a small bounded pool and excess requests get 429.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use exedit_core::checkpoint::load_checkpoint;
use exedit_core::data::EditMask;
use exedit_core::image::Image;
use exedit_core::sampler::{edit_image, EditModel, GuidanceConfig};
use exedit_core::Error as CoreError;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

pub const DEFAULT_SCALE: f64 = 5.0;
pub const DEFAULT_STEPS: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    /// Larger images are rejected; resizing would break background exactness.
    pub max_side: usize,
    pub workers: usize,
    /// Requests allowed to wait for a worker before new ones get 429.
    pub queue: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            max_side: 128,
            workers: 1,
            queue: 4,
        }
    }
}

enum Slot {
    Loading,
    Ready(Arc<EditModel>),
    Failed(String),
}

struct Inner {
    config: ServiceConfig,
    slot: RwLock<Slot>,
    permits: Semaphore,
    pending: AtomicUsize,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    /// State with no model yet; health reports loading until [`AppState::set_model`].
    pub fn new(config: ServiceConfig) -> Self {
        let workers = config.workers.max(1);
        AppState {
            inner: Arc::new(Inner {
                config,
                slot: RwLock::new(Slot::Loading),
                permits: Semaphore::new(workers),
                pending: AtomicUsize::new(0),
            }),
        }
    }

    pub fn with_model(config: ServiceConfig, model: EditModel) -> Self {
        let s = AppState::new(config);
        s.set_model(model);
        s
    }

    pub fn set_model(&self, model: EditModel) {
        *self.inner.slot.write().unwrap() = Slot::Ready(Arc::new(model));
    }

    pub fn set_failed(&self, message: impl Into<String>) {
        *self.inner.slot.write().unwrap() = Slot::Failed(message.into());
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.inner.config
    }

    /// Edits admitted and not yet finished, queued ones included.
    pub fn in_flight(&self) -> usize {
        self.inner.pending.load(Ordering::SeqCst)
    }

    fn model(&self) -> Option<Arc<EditModel>> {
        match &*self.inner.slot.read().unwrap() {
            Slot::Ready(m) => Some(m.clone()),
            _ => None,
        }
    }

    /// Loads a checkpoint on a blocking thread and flips the state when done.
    pub fn load_in_background(&self, path: PathBuf) -> tokio::task::JoinHandle<()> {
        let state = self.clone();
        tokio::task::spawn_blocking(move || match load_checkpoint(&path) {
            Ok(s) => {
                let model = EditModel::from_state(&s);
                log::info!("loaded model {} from {}", model.id, path.display());
                state.set_model(model);
            }
            Err(e) => {
                log::error!("cannot load {}: {e}", path.display());
                state.set_failed(e.to_string());
            }
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EditRequest {
    pub source: String,
    pub mask: String,
    pub reference: String,
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_scale() -> f64 {
    DEFAULT_SCALE
}

fn default_steps() -> usize {
    DEFAULT_STEPS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditResponse {
    pub result: String,
    pub timing_ms: u64,
    pub model: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
            field: None,
        }
    }

    fn field(status: StatusCode, field: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
            field: Some(field.to_string()),
        }
    }

    fn loading() -> Self {
        ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model is not loaded")
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let status = match e {
            CoreError::Parameter(_) | CoreError::Shape(_) | CoreError::Index { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            CoreError::Input(_) | CoreError::Format(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.message,
            field: self.field,
        };
        (self.status, Json(body)).into_response()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/edit", post(edit))
        .route("/api/health", get(health))
        .route("/api/config", get(config))
        .with_state(state)
}

async fn health(State(state): State<AppState>) -> Response {
    match &*state.inner.slot.read().unwrap() {
        Slot::Ready(m) => Json(serde_json::json!({"status": "ok", "model": m.id})).into_response(),
        Slot::Loading => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(serde_json::json!({"status": "loading"})),
        )
            .into_response(),
        Slot::Failed(e) => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(serde_json::json!({"status": "error", "error": e})),
        )
            .into_response(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitsRecord {
    pub max_side: usize,
    pub default_scale: f64,
    pub min_steps: usize,
    pub max_steps: usize,
    pub default_steps: usize,
}

async fn config(State(state): State<AppState>) -> Json<LimitsRecord> {
    let max_steps = state.model().map_or(DEFAULT_STEPS, |m| m.schedule.steps());
    Json(LimitsRecord {
        max_side: state.config().max_side,
        default_scale: DEFAULT_SCALE,
        min_steps: 1,
        max_steps,
        default_steps: DEFAULT_STEPS.min(max_steps),
    })
}

fn decode_field(field: &str, value: &str) -> Result<Vec<u8>, ApiError> {
    let payload = match value.split_once(";base64,") {
        Some((prefix, rest)) if prefix.starts_with("data:") => rest,
        _ => value,
    };
    STANDARD
        .decode(payload.trim())
        .map_err(|e| ApiError::field(StatusCode::BAD_REQUEST, field, format!("{field}: invalid base64 ({e})")))
}

fn decode_image(field: &str, value: &str, max_side: usize) -> Result<Image, ApiError> {
    let bytes = decode_field(field, value)?;
    let img = Image::decode_png(&bytes)
        .map_err(|e| ApiError::field(StatusCode::BAD_REQUEST, field, format!("{field}: {e}")))?;
    if img.height() > max_side || img.width() > max_side {
        return Err(ApiError::field(
            StatusCode::BAD_REQUEST,
            field,
            format!("{field}: {}x{} exceeds the {max_side} px limit", img.width(), img.height()),
        ));
    }
    Ok(img)
}

/// Decoded and validated edit inputs.
pub struct ParsedEdit {
    pub source: Image,
    pub mask: EditMask,
    pub reference: Image,
    pub guidance: GuidanceConfig,
}

pub fn parse_request(req: &EditRequest, max_side: usize, max_steps: usize) -> Result<ParsedEdit, ApiError> {
    let source = decode_image("source", &req.source, max_side)?;
    let reference = decode_image("reference", &req.reference, max_side)?;
    let mask_bytes = decode_field("mask", &req.mask)?;
    let mask = EditMask::from_png(&mask_bytes)
        .map_err(|e| ApiError::field(StatusCode::BAD_REQUEST, "mask", format!("mask: {e}")))?;
    if (mask.height(), mask.width()) != (source.height(), source.width()) {
        return Err(ApiError::field(
            StatusCode::BAD_REQUEST,
            "mask",
            format!(
                "mask is {}x{} but source is {}x{}",
                mask.width(),
                mask.height(),
                source.width(),
                source.height()
            ),
        ));
    }
    if !(req.scale >= 0.0 && req.scale.is_finite()) {
        return Err(ApiError::field(
            StatusCode::UNPROCESSABLE_ENTITY,
            "scale",
            format!("scale must be a finite number >= 0, got {}", req.scale),
        ));
    }
    if req.steps == 0 || req.steps > max_steps {
        return Err(ApiError::field(
            StatusCode::UNPROCESSABLE_ENTITY,
            "steps",
            format!("steps must be in 1..={max_steps}, got {}", req.steps),
        ));
    }
    Ok(ParsedEdit {
        source,
        mask,
        reference,
        guidance: GuidanceConfig {
            scale: req.scale,
            num_steps: req.steps,
            eta: 0.0,
            seed: req.seed,
        },
    })
}

struct PendingGuard<'a>(&'a AtomicUsize);

impl Drop for PendingGuard<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

async fn edit(State(state): State<AppState>, body: Bytes) -> Result<Json<EditResponse>, ApiError> {
    let model = state.model().ok_or_else(ApiError::loading)?;
    let req: EditRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid request body: {e}")))?;
    let parsed = parse_request(&req, state.config().max_side, model.schedule.steps())?;

    let inner = &state.inner;
    let limit = inner.config.workers.max(1) + inner.config.queue;
    if inner.pending.fetch_add(1, Ordering::SeqCst) >= limit {
        inner.pending.fetch_sub(1, Ordering::SeqCst);
        return Err(ApiError::new(StatusCode::TOO_MANY_REQUESTS, "edit queue is full"));
    }
    let _guard = PendingGuard(&inner.pending);
    let _permit = inner
        .permits
        .acquire()
        .await
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "service is shutting down"))?;

    let start = Instant::now();
    let id = model.id.clone();
    let result = tokio::task::spawn_blocking(move || {
        edit_image(&model, &parsed.source, &parsed.mask, &parsed.reference, &parsed.guidance)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("edit worker failed: {e}")))??;
    Ok(Json(EditResponse {
        result: STANDARD.encode(result.encode_png()),
        timing_ms: start.elapsed().as_millis() as u64,
        model: id,
    }))
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(addr: &str, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
