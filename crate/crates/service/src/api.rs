//! Routes and handlers.

use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use maskface_core::io::{decode_image_png, decode_mask_png, encode_image_png, encode_mask_png};
use maskface_core::pipeline::{EditTiming, EmbeddingCache};
use maskface_core::preprocess::{fit_similarity, warp_image, Landmarks5};
use maskface_core::schema::Region;
use maskface_core::{EditRequest, Error, Image, SampleStore};
use serde::{Deserialize, Serialize};

use crate::assets::AssetError;
use crate::state::{load_generator, load_parser, AppState, RefResolver};

/// Header carrying an optional session id on generation requests.
pub const SESSION_HEADER: &str = "x-session-id";
pub const CHECKPOINT_HEADER: &str = "x-checkpoint-id";
pub const SCHEMA_VERSION_HEADER: &str = "x-schema-version";
pub const ASSET_HEADER: &str = "x-asset-id";

/// An error response: status plus a JSON `{"error": ...}` body.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.status.is_server_error() {
            tracing::error!(status = %self.status, "{}", self.message);
        }
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Lookup(_) => StatusCode::NOT_FOUND,
            Error::Decode(_) | Error::Config(_) => StatusCode::BAD_REQUEST,
            Error::Schema(_) | Error::Shape(_) | Error::Alignment(_) | Error::Format { .. } => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => StatusCode::NOT_FOUND,
            Error::Checkpoint(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<AssetError> for ApiError {
    fn from(e: AssetError) -> Self {
        let status = match e {
            AssetError::NotFound(_) => StatusCode::NOT_FOUND,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.max_upload_bytes;
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/schema", get(schema))
        .route("/v1/assets", post(upload_asset))
        .route("/v1/assets/{id}", get(download_asset))
        .route("/v1/parse", post(parse))
        .route("/v1/generate", post(generate))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(session_info).delete(delete_session))
        .route("/v1/sessions/{id}/mask", get(session_mask))
        .route("/v1/model", get(model_info).put(load_model))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))?
}

fn png_response(bytes: Vec<u8>, extra: Vec<(&'static str, String)>) -> Response {
    let mut res = (StatusCode::OK, [(header::CONTENT_TYPE, "image/png")], bytes).into_response();
    for (k, v) in extra {
        if let Ok(v) = HeaderValue::from_str(&v) {
            res.headers_mut().insert(k, v);
        }
    }
    res
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelInfo {
    pub version: u64,
    pub checkpoint_id: Option<String>,
    pub parser_id: Option<String>,
}

fn model_info_of(state: &AppState) -> ModelInfo {
    let m = state.model.current();
    ModelInfo {
        version: m.version,
        checkpoint_id: m.checkpoint_id().map(str::to_string),
        parser_id: m.parser_id().map(str::to_string),
    }
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "model": model_info_of(&state) }))
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct LabelInfo {
    pub id: u8,
    pub name: String,
    pub region: Region,
    /// Component the label belongs to, absent for background labels.
    pub component: Option<String>,
    pub color: [u8; 3],
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SchemaInfo {
    pub name: String,
    pub version: u32,
    pub resolution: usize,
    pub labels: Vec<LabelInfo>,
    /// Indexed-PNG palette, one entry per label id.
    pub palette: Vec<[u8; 3]>,
}

async fn schema(State(state): State<Arc<AppState>>) -> Json<SchemaInfo> {
    let s = &state.schema;
    Json(SchemaInfo {
        name: s.name.clone(),
        version: s.version,
        resolution: state.resolution,
        labels: s
            .labels
            .iter()
            .map(|l| LabelInfo {
                id: l.id,
                name: l.name.clone(),
                region: l.region,
                component: l.region.component().map(|c| c.name().to_string()),
                color: l.color,
            })
            .collect(),
        palette: s.palette(),
    })
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct AssetInfo {
    pub id: String,
    /// `mask` when the PNG decodes as a valid label mask, else `image`.
    pub kind: String,
    pub width: usize,
    pub height: usize,
}

async fn upload_asset(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let image = decode_image_png(&body).map_err(ApiError::from)?;
    let kind = if decode_mask_png(&body, &state.schema).is_ok() { "mask" } else { "image" };
    let st = state.clone();
    let (id, created) = blocking(move || Ok(st.assets.put(&body)?)).await?;
    let status = if created { StatusCode::CREATED } else { StatusCode::OK };
    let info = AssetInfo {
        id,
        kind: kind.into(),
        width: image.width(),
        height: image.height(),
    };
    Ok((status, Json(info)).into_response())
}

async fn download_asset(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let bytes = blocking(move || Ok(state.assets.get(&id)?)).await?;
    Ok(png_response(bytes, Vec::new()))
}

#[derive(Debug, Deserialize)]
pub struct ParseQuery {
    /// Ten comma-separated numbers: `x,y` for both eyes, nose, mouth corners.
    pub landmarks: Option<String>,
}

fn parse_landmarks(text: &str) -> ApiResult<Landmarks5> {
    let vals: Vec<f64> = text
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, "landmarks must be ten numbers"))?;
    if vals.len() != 10 {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "landmarks must be ten numbers"));
    }
    let mut pts = [[0.0; 2]; 5];
    for (i, v) in vals.into_iter().enumerate() {
        pts[i / 2][i % 2] = v;
    }
    Ok(Landmarks5(pts))
}

/// Brings an upload to the working resolution: identity for aligned faces,
/// a similarity warp when landmarks are given.
fn align_upload(image: &Image, landmarks: Option<&Landmarks5>, resolution: usize) -> maskface_core::Result<Image> {
    match landmarks {
        Some(lm) => {
            lm.validate(image.height(), image.width())?;
            let to_aligned = fit_similarity(lm, &Landmarks5::canonical(resolution))?;
            Ok(warp_image(image, &to_aligned.inverse()?, resolution, resolution))
        }
        None if image.height() == resolution && image.width() == resolution => Ok(image.clone()),
        None => Err(Error::Alignment(format!(
            "image is {}x{}, expected an aligned {resolution}x{resolution} face or landmarks",
            image.width(),
            image.height()
        ))),
    }
}

async fn parse(State(state): State<Arc<AppState>>, Query(q): Query<ParseQuery>, body: Bytes) -> ApiResult<Response> {
    let landmarks = q.landmarks.as_deref().map(parse_landmarks).transpose()?;
    let image = decode_image_png(&body)?;
    let model = state.model.current();
    let parser = model
        .parser
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "no parser loaded"))?;
    let aligned = align_upload(&image, landmarks.as_ref(), state.resolution)?;
    let st = state.clone();
    let (png, id) = blocking(move || {
        let mask = parser.parser.predict(&[&aligned])?.remove(0);
        let png = encode_mask_png(&mask, &st.schema)?;
        let (id, _) = st.assets.put(&png)?;
        Ok((png, id))
    })
    .await?;
    Ok(png_response(
        png,
        vec![
            (SCHEMA_VERSION_HEADER, format!("{}:{}", state.schema.name, state.schema.version)),
            (ASSET_HEADER, id),
        ],
    ))
}

/// Reads an edit request as JSON or, for any other content type, TOML.
pub fn decode_edit_request(headers: &HeaderMap, body: &[u8]) -> ApiResult<EditRequest> {
    let json = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("application/json"));
    let bad = |m: String| ApiError::new(StatusCode::BAD_REQUEST, m);
    if json {
        serde_json::from_slice(body).map_err(|e| bad(format!("edit request: {e}")))
    } else {
        let text = std::str::from_utf8(body).map_err(|_| bad("edit request is not UTF-8".into()))?;
        EditRequest::from_toml(text).map_err(|e| bad(e.to_string()))
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// `Server-Timing` value for one generation.
pub fn server_timing(t: &EditTiming, encode: Duration) -> String {
    format!(
        "resolve;dur={:.3}, embed;dur={:.3}, decode;dur={:.3}, encode;dur={:.3}",
        ms(t.resolve),
        ms(t.embed),
        ms(t.decode),
        ms(encode)
    )
}

async fn generate(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    let req = decode_edit_request(&headers, &body)?;
    let session = match headers.get(SESSION_HEADER) {
        Some(v) => {
            let id = v.to_str().unwrap_or_default();
            Some(
                state
                    .sessions
                    .get(id)
                    .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no session {id}")))?,
            )
        }
        None => None,
    };
    let model = state.model.current();
    let loaded = model
        .generator
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "no checkpoint loaded"))?;
    let st = state.clone();
    let (png, timing, ckpt) = blocking(move || {
        let resolver = RefResolver { state: &st };
        let g = &loaded.generator;
        let (image, timing) = match session {
            Some(session) => {
                let mut s = session.lock().expect("session poisoned");
                if s.checkpoint_id.as_deref() != Some(loaded.checkpoint_id.as_str()) {
                    s.cache.clear();
                    s.checkpoint_id = Some(loaded.checkpoint_id.clone());
                }
                let out = g.generate_cached(&st.schema, &req, &resolver, &mut s.cache)?;
                s.last_target_mask = Some((req.target_mask.clone(), resolver.mask(&req.target_mask)?));
                out
            }
            None => g.generate_cached(&st.schema, &req, &resolver, &mut EmbeddingCache::default())?,
        };
        let clock = Instant::now();
        let png = encode_image_png(&image)?;
        Ok((png, server_timing(&timing, clock.elapsed()), loaded.checkpoint_id.clone()))
    })
    .await?;
    Ok(png_response(
        png,
        vec![("server-timing", timing), (CHECKPOINT_HEADER, ckpt)],
    ))
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SessionInfo {
    pub id: String,
    pub checkpoint_id: Option<String>,
    pub cached_embeddings: usize,
    pub cache_hits: u64,
    pub cache_misses: u64,
    /// Reference of the most recent target mask, if any.
    pub last_target_mask: Option<String>,
}

fn session_info_of(s: &crate::state::Session) -> SessionInfo {
    SessionInfo {
        id: s.id.clone(),
        checkpoint_id: s.checkpoint_id.clone(),
        cached_embeddings: s.cache.len(),
        cache_hits: s.cache.hits(),
        cache_misses: s.cache.misses(),
        last_target_mask: s.last_target_mask.as_ref().map(|(r, _)| r.clone()),
    }
}

async fn create_session(State(state): State<Arc<AppState>>) -> (StatusCode, Json<SessionInfo>) {
    let session = state.sessions.create();
    let mut s = session.lock().expect("session poisoned");
    s.checkpoint_id = state.model.current().checkpoint_id().map(str::to_string);
    (StatusCode::CREATED, Json(session_info_of(&s)))
}

fn find_session(state: &AppState, id: &str) -> ApiResult<Arc<std::sync::Mutex<crate::state::Session>>> {
    state
        .sessions
        .get(id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no session {id}")))
}

async fn session_info(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionInfo>> {
    let session = find_session(&state, &id)?;
    let s = session.lock().expect("session poisoned");
    Ok(Json(session_info_of(&s)))
}

async fn delete_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> StatusCode {
    if state.sessions.remove(&id) {
        StatusCode::NO_CONTENT
    } else {
        StatusCode::NOT_FOUND
    }
}

async fn session_mask(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let session = find_session(&state, &id)?;
    let mask = session
        .lock()
        .expect("session poisoned")
        .last_target_mask
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "session has no target mask yet"))?;
    Ok(png_response(encode_mask_png(&mask.1, &state.schema)?, Vec::new()))
}

async fn model_info(State(state): State<Arc<AppState>>) -> Json<ModelInfo> {
    Json(model_info_of(&state))
}

/// Server-side checkpoint paths to load; absent fields keep what is loaded.
#[derive(Debug, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct LoadModelRequest {
    pub checkpoint: Option<std::path::PathBuf>,
    pub parser: Option<std::path::PathBuf>,
}

async fn load_model(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<ModelInfo>> {
    let req: LoadModelRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("model request: {e}")))?;
    let st = state.clone();
    blocking(move || {
        let generator = req.checkpoint.as_deref().map(|p| load_generator(p, &st.schema)).transpose()?;
        if let Some(g) = &generator {
            if g.generator.spec().resolution != st.resolution {
                return Err(ApiError::new(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    "checkpoint resolution differs from the service",
                ));
            }
        }
        let parser = req.parser.as_deref().map(|p| load_parser(p, &st.schema)).transpose()?;
        st.model.swap(generator, parser);
        Ok(())
    })
    .await?;
    Ok(Json(model_info_of(&state)))
}
