//! HTTP/JSON editing service. Every request carries the full code it wants decoded, so
//! handlers only read shared state; the checkpoint and manifold sit behind
//! readers-writer locks and are swapped wholesale by the reload endpoint.
//!
//! Routes:
//! - `GET /health`
//! - `GET /materials`: names with stored `mu` and `sigma`
//! - `POST /decode {code | material, scene?}`: reflectance statistics and a preview
//! - `POST /render {code | material, scene?}`: preview as base64 PNG in JSON
//! - `POST /render/raw`: same request, `image/png` body
//! - `GET /manifold`: embedded training materials
//! - `POST /manifold/invert {x, y, scene?}`: latent code and preview for a 2D point
//! - `GET /traverse?dim=&steps=&range=&material=&size=`: traversal contact sheet
//! - `POST /admin/reload {checkpoint?, manifold?}`: reloads files from disk
//!
//! Render timings are reported in the `x-elapsed-ms` header so that identical
//! requests produce identical bodies.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use latentbrdf::checkpoint::Checkpoint;
use latentbrdf::latent_tools::{
    decode_augmented_slices, traverse, ManifoldModel, TraversalSpec, DEFAULT_TRAVERSAL_RANGE,
};
use latentbrdf::metrics::to_reflectance;
use latentbrdf::preprocess::{expand_slices, SliceTable, N_SLICES, PLANE_SIZE};
use latentbrdf::render_preview::{render_codes, render_sphere, Image, PreviewCode, PreviewScene};
use latentbrdf::vae_model::LatentCode;

pub const MAX_PREVIEW_SIZE: usize = 1024;
pub const MAX_TRAVERSAL_STEPS: usize = 32;
pub const ELAPSED_HEADER: &str = "x-elapsed-ms";

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Unavailable(String),
    #[error("{0}")]
    Internal(String),
}

impl From<latentbrdf::Error> for ApiError {
    fn from(e: latentbrdf::Error) -> Self {
        use latentbrdf::Error as E;
        match e {
            E::Precondition(_) | E::Config(_) | E::Bounds(_) => ApiError::BadRequest(e.to_string()),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self {
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Default)]
struct Sources {
    checkpoint: Option<PathBuf>,
    manifold: Option<PathBuf>,
}

/// Shared service state.
#[derive(Debug, Default)]
pub struct AppState {
    checkpoint: RwLock<Option<Arc<Checkpoint>>>,
    manifold: RwLock<Option<Arc<ManifoldModel>>>,
    sources: RwLock<Sources>,
}

pub type SharedState = Arc<AppState>;

impl AppState {
    pub fn new(checkpoint: Option<Checkpoint>, manifold: Option<ManifoldModel>) -> Self {
        AppState {
            checkpoint: RwLock::new(checkpoint.map(Arc::new)),
            manifold: RwLock::new(manifold.map(Arc::new)),
            sources: RwLock::default(),
        }
    }

    /// Loads from disk and remembers the paths for later reloads.
    pub fn from_paths(checkpoint: Option<PathBuf>, manifold: Option<PathBuf>) -> latentbrdf::Result<Self> {
        let state = AppState::default();
        state.reload(checkpoint, manifold)?;
        Ok(state)
    }

    /// Replaces the checkpoint and/or manifold. `None` reloads from the remembered path.
    pub fn reload(&self, checkpoint: Option<PathBuf>, manifold: Option<PathBuf>) -> latentbrdf::Result<()> {
        let (ck_path, mf_path) = {
            let s = self.sources.read().expect("lock");
            (checkpoint.or_else(|| s.checkpoint.clone()), manifold.or_else(|| s.manifold.clone()))
        };
        let ck = ck_path.as_ref().map(Checkpoint::load).transpose()?;
        let mf = mf_path.as_ref().map(ManifoldModel::load).transpose()?;
        if let Some(ck) = ck {
            *self.checkpoint.write().expect("lock") = Some(Arc::new(ck));
        }
        if let Some(mf) = mf {
            *self.manifold.write().expect("lock") = Some(Arc::new(mf));
        }
        let mut s = self.sources.write().expect("lock");
        s.checkpoint = ck_path;
        s.manifold = mf_path;
        Ok(())
    }

    pub fn checkpoint(&self) -> ApiResult<Arc<Checkpoint>> {
        self.checkpoint
            .read()
            .expect("lock")
            .clone()
            .ok_or_else(|| ApiError::Unavailable("no checkpoint loaded".into()))
    }

    pub fn manifold(&self) -> ApiResult<Arc<ManifoldModel>> {
        self.manifold
            .read()
            .expect("lock")
            .clone()
            .ok_or_else(|| ApiError::Unavailable("no manifold loaded".into()))
    }
}

pub fn router(state: SharedState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/materials", get(materials))
        .route("/decode", post(decode))
        .route("/render", post(render))
        .route("/render/raw", post(render_raw))
        .route("/manifold", get(manifold))
        .route("/manifold/invert", post(manifold_invert))
        .route("/traverse", get(traverse_sheet))
        .route("/admin/reload", post(reload))
        .with_state(state)
}

pub async fn serve(state: SharedState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("invalid request body: {e}")))
}

fn with_elapsed(mut resp: Response, start: Instant) -> Response {
    let ms = format!("{:.1}", start.elapsed().as_secs_f64() * 1e3);
    if let Ok(v) = HeaderValue::from_str(&ms) {
        resp.headers_mut().insert(ELAPSED_HEADER, v);
    }
    resp
}

fn check_scene(scene: Option<PreviewScene>) -> ApiResult<PreviewScene> {
    let scene = scene.unwrap_or_default();
    scene.validate()?;
    if scene.size > MAX_PREVIEW_SIZE {
        return Err(ApiError::BadRequest(format!("preview size must be at most {MAX_PREVIEW_SIZE}")));
    }
    Ok(scene)
}

fn png_base64(img: &Image) -> ApiResult<String> {
    Ok(base64::engine::general_purpose::STANDARD.encode(img.encode_png()?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CodeRequest {
    code: Option<Vec<f64>>,
    material: Option<String>,
    scene: Option<PreviewScene>,
}

fn resolve_code(ck: &Checkpoint, req: &CodeRequest) -> ApiResult<PreviewCode> {
    match (&req.code, &req.material) {
        (Some(values), _) => Ok(PreviewCode::from_values(values.clone(), ck.latent_dim())?),
        (None, Some(name)) => ck
            .material_code(name)
            .map(PreviewCode::Latent)
            .ok_or_else(|| ApiError::NotFound(format!("unknown material {name:?}"))),
        (None, None) => Err(ApiError::BadRequest("request needs a code or a material name".into())),
    }
}

fn decode_table(ck: &Checkpoint, code: &PreviewCode) -> ApiResult<SliceTable> {
    Ok(match code {
        PreviewCode::Latent(c) => ck.decode_slices(c)?,
        PreviewCode::Augmented(v) => decode_augmented_slices(ck, v)?,
    })
}

fn code_values(code: &PreviewCode) -> Vec<f64> {
    match code {
        PreviewCode::Latent(c) => c.0.clone(),
        PreviewCode::Augmented(v) => v.0.clone(),
    }
}

async fn health(State(state): State<SharedState>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "checkpoint_loaded": state.checkpoint().is_ok(),
        "manifold_loaded": state.manifold().is_ok(),
    }))
}

#[derive(Serialize)]
struct MaterialEntry {
    name: String,
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

async fn materials(State(state): State<SharedState>) -> ApiResult<Json<Value>> {
    let ck = state.checkpoint()?;
    let list: Vec<MaterialEntry> = ck
        .latent_table
        .iter()
        .map(|(name, s)| MaterialEntry {
            name: name.clone(),
            mu: s.mu.clone(),
            sigma: s.sigma(),
        })
        .collect();
    Ok(Json(json!({ "latent_dim": ck.latent_dim(), "materials": list })))
}

async fn decode(State(state): State<SharedState>, body: Bytes) -> ApiResult<Response> {
    let start = Instant::now();
    let req: CodeRequest = parse_body(&body)?;
    let ck = state.checkpoint()?;
    let body = blocking(move || {
        let scene = check_scene(req.scene.clone())?;
        let code = resolve_code(&ck, &req)?;
        let table = decode_table(&ck, &code)?;
        let refl = to_reflectance(&table);
        let block = N_SLICES * PLANE_SIZE;
        let mut mean = [0.0; 3];
        let mut max = [0.0f64; 3];
        for c in 0..3 {
            let ch = &refl[c * block..(c + 1) * block];
            mean[c] = ch.iter().sum::<f64>() / block as f64;
            max[c] = ch.iter().copied().fold(0.0, f64::max);
        }
        let img = render_sphere(&expand_slices(&table, "decoded")?, &scene)?;
        Ok(json!({
            "code": code_values(&code),
            "augmented": matches!(code, PreviewCode::Augmented(_)),
            "latent_dim": ck.latent_dim(),
            "reflectance_mean": mean,
            "reflectance_max": max,
            "width": img.width,
            "height": img.height,
            "image_png_base64": png_base64(&img)?,
        }))
    })
    .await?;
    Ok(with_elapsed(Json(body).into_response(), start))
}

fn render_request(ck: &Checkpoint, req: &CodeRequest) -> ApiResult<Image> {
    let scene = check_scene(req.scene.clone())?;
    let code = resolve_code(ck, req)?;
    let table = decode_table(ck, &code)?;
    Ok(render_sphere(&expand_slices(&table, "decoded")?, &scene)?)
}

async fn render(State(state): State<SharedState>, body: Bytes) -> ApiResult<Response> {
    let start = Instant::now();
    let req: CodeRequest = parse_body(&body)?;
    let ck = state.checkpoint()?;
    let body = blocking(move || {
        let img = render_request(&ck, &req)?;
        Ok(json!({
            "width": img.width,
            "height": img.height,
            "image_png_base64": png_base64(&img)?,
        }))
    })
    .await?;
    Ok(with_elapsed(Json(body).into_response(), start))
}

async fn render_raw(State(state): State<SharedState>, body: Bytes) -> ApiResult<Response> {
    let start = Instant::now();
    let req: CodeRequest = parse_body(&body)?;
    let ck = state.checkpoint()?;
    let png = blocking(move || Ok(render_request(&ck, &req)?.encode_png()?)).await?;
    Ok(with_elapsed(([(header::CONTENT_TYPE, "image/png")], png).into_response(), start))
}

async fn manifold(State(state): State<SharedState>) -> ApiResult<Json<Value>> {
    let m = state.manifold()?;
    let points: Vec<Value> = m
        .names
        .iter()
        .zip(&m.embedding)
        .map(|(n, p)| json!({ "name": n, "x": p[0], "y": p[1] }))
        .collect();
    Ok(Json(json!({ "points": points, "bounds": m.bounds() })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InvertRequest {
    x: f64,
    y: f64,
    scene: Option<PreviewScene>,
}

async fn manifold_invert(State(state): State<SharedState>, body: Bytes) -> ApiResult<Response> {
    let start = Instant::now();
    let req: InvertRequest = parse_body(&body)?;
    let m = state.manifold()?;
    let ck = state.checkpoint()?;
    let body = blocking(move || {
        let scene = check_scene(req.scene)?;
        let inv = m.inverse([req.x, req.y])?;
        if inv.latent.dim() != ck.latent_dim() {
            return Err(ApiError::Internal("manifold and checkpoint latent sizes differ".into()));
        }
        let img = render_sphere(&ck.decode_brdf(&inv.latent, "manifold")?, &scene)?;
        Ok(json!({
            "latent": inv.latent.0,
            "extrapolated": inv.extrapolated,
            "width": img.width,
            "height": img.height,
            "image_png_base64": png_base64(&img)?,
        }))
    })
    .await?;
    Ok(with_elapsed(Json(body).into_response(), start))
}

fn query_param<T: std::str::FromStr>(q: &HashMap<String, String>, key: &str, default: T) -> ApiResult<T> {
    match q.get(key) {
        None => Ok(default),
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| ApiError::BadRequest(format!("query parameter {key}={v:?} is not valid"))),
    }
}

async fn traverse_sheet(
    State(state): State<SharedState>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let start = Instant::now();
    let ck = state.checkpoint()?;
    let dim: usize = match q.get("dim") {
        Some(_) => query_param(&q, "dim", 0)?,
        None => return Err(ApiError::BadRequest("query parameter dim is required".into())),
    };
    let steps: usize = query_param(&q, "steps", 7)?;
    if steps > MAX_TRAVERSAL_STEPS {
        return Err(ApiError::BadRequest(format!("steps must be at most {MAX_TRAVERSAL_STEPS}")));
    }
    let range = match q.get("range") {
        None => DEFAULT_TRAVERSAL_RANGE,
        Some(r) => {
            let parts: Vec<&str> = r.split(',').collect();
            let parsed: Vec<f64> = parts.iter().filter_map(|p| p.trim().parse().ok()).collect();
            if parts.len() != 2 || parsed.len() != 2 {
                return Err(ApiError::BadRequest(format!("range={r:?} must be two numbers a,b")));
            }
            [parsed[0], parsed[1]]
        }
    };
    let size: usize = query_param(&q, "size", 64)?;
    let base = match q.get("material") {
        Some(name) => ck
            .material_code(name)
            .ok_or_else(|| ApiError::NotFound(format!("unknown material {name:?}")))?,
        None => LatentCode(vec![0.0; ck.latent_dim()]),
    };
    let body = blocking(move || {
        let scene = check_scene(Some(PreviewScene { size, ..Default::default() }))?;
        let spec = TraversalSpec { base, dim, range, steps };
        let codes = traverse(&spec)?;
        let values: Vec<f64> = codes.iter().map(|c| c.0[dim - 1]).collect();
        let tiles: Vec<PreviewCode> = codes.iter().cloned().map(PreviewCode::Latent).collect();
        let sheet = render_codes(&ck, &tiles, &scene, steps)?;
        Ok(json!({
            "dim": dim,
            "values": values,
            "codes": codes,
            "rows": 1,
            "cols": steps,
            "width": sheet.width,
            "height": sheet.height,
            "image_png_base64": png_base64(&sheet)?,
        }))
    })
    .await?;
    Ok(with_elapsed(Json(body).into_response(), start))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReloadRequest {
    checkpoint: Option<PathBuf>,
    manifold: Option<PathBuf>,
}

async fn reload(State(state): State<SharedState>, body: Bytes) -> ApiResult<Json<Value>> {
    let req: ReloadRequest = if body.is_empty() { ReloadRequest::default() } else { parse_body(&body)? };
    let st = state.clone();
    blocking(move || {
        st.reload(req.checkpoint, req.manifold)
            .map_err(|e| ApiError::BadRequest(format!("reload failed: {e}")))
    })
    .await?;
    Ok(Json(json!({
        "checkpoint_loaded": state.checkpoint().is_ok(),
        "manifold_loaded": state.manifold().is_ok(),
    })))
}
