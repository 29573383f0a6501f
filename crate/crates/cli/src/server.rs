//! HTTP inference and export service.
//!
//! Every handler is a pure function of the request and the loaded checkpoint.
//! The model slot is filled once; until then `/api/health` and `/api/infer`
//! answer 503.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use primsketch::export::{export, ExportFormat, DEFAULT_SCALE};
use primsketch::geometry::{Primitive, PrimitiveKind};
use primsketch::handdraw::{rasterize, RasterImage, Stroke};
use primsketch::model::CHECKPOINT_VERSION;
use primsketch::pipeline::infer;
use primsketch::Model32;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tower_http::services::ServeDir;

pub const MAX_BODY_BYTES: usize = 1 << 20;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// A loaded checkpoint with its content-derived version tag.
pub struct LoadedModel {
    pub model: Model32,
    pub version: String,
}

impl LoadedModel {
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, primsketch::model::ModelError> {
        let model = Model32::from_bytes(bytes, None)?;
        Ok(Self { model, version: checkpoint_version(bytes) })
    }
}

/// First 12 hex digits of the checkpoint's SHA-256.
pub fn checkpoint_version(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(6).map(|b| format!("{b:02x}")).collect()
}

#[derive(Default)]
pub struct AppState {
    model: OnceLock<Arc<LoadedModel>>,
}

impl AppState {
    pub fn pending() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn loaded(model: LoadedModel) -> Arc<Self> {
        let s = Self::default();
        let _ = s.model.set(Arc::new(model));
        Arc::new(s)
    }

    /// Returns false when a model was already installed.
    pub fn install(&self, model: LoadedModel) -> bool {
        self.model.set(Arc::new(model)).is_ok()
    }

    fn model(&self) -> Result<Arc<LoadedModel>, ApiError> {
        self.model.get().cloned().ok_or(ApiError::NotReady)
    }
}

#[derive(Debug)]
pub enum ApiError {
    BadRequest(String),
    NotReady,
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, message) = match self {
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            ApiError::NotReady => (StatusCode::SERVICE_UNAVAILABLE, "model is still loading".to_string()),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, m),
        };
        (status, Json(serde_json::json!({ "error": message }))).into_response()
    }
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("invalid request body: {e}")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferRequest {
    /// Base64 PNG, 128×128 grayscale.
    pub image: Option<String>,
    /// Polylines in normalized sketch coordinates.
    pub strokes: Option<Vec<Vec<[f64; 2]>>>,
    pub threshold: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct PrimitiveOut {
    pub kind: PrimitiveKind,
    pub params: [f64; 6],
    pub confidence: f64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelInfo {
    pub version: String,
    pub checkpoint_format: u32,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct InferResponse {
    pub primitives: Vec<PrimitiveOut>,
    pub model: ModelInfo,
}

impl InferRequest {
    pub fn to_image(&self) -> Result<RasterImage, ApiError> {
        match (&self.image, &self.strokes) {
            (Some(b64), None) => {
                let png = base64::engine::general_purpose::STANDARD
                    .decode(b64.trim())
                    .map_err(|e| ApiError::BadRequest(format!("image is not base64: {e}")))?;
                RasterImage::from_png(&png).map_err(|e| ApiError::BadRequest(e.to_string()))
            }
            (None, Some(strokes)) => Ok(rasterize(&strokes_from_polylines(strokes)?)),
            _ => Err(ApiError::BadRequest("exactly one of `image` and `strokes` is required".into())),
        }
    }
}

/// Single-point polylines become dots; every coordinate must be finite.
pub fn strokes_from_polylines(lines: &[Vec<[f64; 2]>]) -> Result<Vec<Stroke>, ApiError> {
    lines
        .iter()
        .enumerate()
        .map(|(i, pts)| {
            if pts.iter().flatten().any(|v| !v.is_finite()) {
                return Err(ApiError::BadRequest(format!("stroke {i} has a non-finite coordinate")));
            }
            match pts.as_slice() {
                [] => Err(ApiError::BadRequest(format!("stroke {i} is empty"))),
                [p] => Ok(Stroke::dot(*p)),
                _ => Ok(Stroke::new(pts.clone())),
            }
        })
        .collect()
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    match state.model.get() {
        Some(m) => Json(serde_json::json!({ "status": "ok", "model_version": m.version })).into_response(),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(serde_json::json!({ "status": "loading", "model_version": null })),
        )
            .into_response(),
    }
}

async fn infer_handler(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<InferResponse>, ApiError> {
    let loaded = state.model()?;
    let req: InferRequest = parse_body(&body)?;
    let threshold = req.threshold.unwrap_or(DEFAULT_THRESHOLD);
    if !(0.0..1.0).contains(&threshold) {
        return Err(ApiError::BadRequest(format!("threshold {threshold} must lie in [0, 1)")));
    }
    let image = req.to_image()?;
    let detections = tokio::task::spawn_blocking({
        let loaded = loaded.clone();
        move || infer(&loaded.model, &image, threshold)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))?
    .map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(Json(InferResponse {
        primitives: detections
            .into_iter()
            .map(|d| PrimitiveOut { kind: d.primitive.kind, params: d.primitive.params, confidence: d.confidence })
            .collect(),
        model: ModelInfo { version: loaded.version.clone(), checkpoint_format: CHECKPOINT_VERSION },
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportRequest {
    pub primitives: Vec<ExportPrimitive>,
    pub format: String,
    pub scale: Option<f64>,
}

/// Accepts the `confidence` field so inference output can be posted back unchanged.
#[derive(Debug, Deserialize)]
pub struct ExportPrimitive {
    pub kind: PrimitiveKind,
    pub params: [f64; 6],
}

async fn export_handler(body: Bytes) -> Result<Response, ApiError> {
    let req: ExportRequest = parse_body(&body)?;
    let format = ExportFormat::from_str(&req.format).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    let prims = req
        .primitives
        .iter()
        .enumerate()
        .map(|(i, p)| Primitive::new(p.kind, p.params).map_err(|e| ApiError::BadRequest(format!("primitive {i}: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let bytes = export(&prims, format, req.scale.unwrap_or(DEFAULT_SCALE)).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    let disposition = format!("attachment; filename=\"sketch.{}\"", format.extension());
    Ok(([(header::CONTENT_TYPE, format.content_type().to_string()), (header::CONTENT_DISPOSITION, disposition)], bytes)
        .into_response())
}

/// API routes, plus static files under `/` when `static_dir` is given.
pub fn router(state: Arc<AppState>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/infer", post(infer_handler))
        .route("/api/export", post(export_handler))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub struct ServeConfig {
    pub checkpoint: PathBuf,
    pub addr: std::net::SocketAddr,
    pub static_dir: Option<PathBuf>,
}

/// Binds first, then loads the checkpoint in the background so health
/// reports 503 until the model is ready.
pub async fn serve(cfg: ServeConfig) -> anyhow::Result<()> {
    let state = AppState::pending();
    let listener = tokio::net::TcpListener::bind(cfg.addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    let loader = {
        let state = state.clone();
        let path = cfg.checkpoint.clone();
        tokio::task::spawn_blocking(move || -> anyhow::Result<()> {
            let bytes = std::fs::read(&path)?;
            let loaded = LoadedModel::from_checkpoint_bytes(&bytes)?;
            log::info!("model {} loaded from {}", loaded.version, path.display());
            state.install(loaded);
            Ok(())
        })
    };
    let app = router(state, cfg.static_dir.as_deref());
    let server = std::future::IntoFuture::into_future(axum::serve(listener, app));
    tokio::pin!(server);
    tokio::select! {
        r = &mut server => return Ok(r?),
        r = loader => r??,
    }
    server.await?;
    Ok(())
}
