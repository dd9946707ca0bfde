//! Live editing backend for one avatar.
//!
//! All routes live under `/v1`. Request bodies are JSON; renders come back
//! as PNG bytes and `/v1/stream` pushes one binary PNG frame per state change.
//! Edits, undo and parameter changes are serialized through one FIFO writer;
//! renders read an immutable snapshot and never wait for the writer.

pub mod error;
pub mod session;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::header;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use futures::{SinkExt, StreamExt};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use gma_core::edit::EditCommand;
use gma_core::render::{CameraJson, Selection};

pub use error::ApiError;
pub use session::{EditReply, Keyframe, ParamsDelta, ParamsOverride, ServiceConfig, Session, StateReply};

type AppState = Arc<Session>;

/// Parse a JSON body, naming the offending field on failure.
pub fn parse_json<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            ApiError::BadRequest(format!("invalid request body: {}", e.inner()))
        } else {
            ApiError::BadRequest(format!("invalid field `{path}`: {}", e.inner()))
        }
    })
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

fn size(width: Option<usize>, height: Option<usize>) -> Result<Option<(usize, usize)>, ApiError> {
    match (width, height) {
        (Some(w), Some(h)) => Ok(Some((w, h))),
        (None, None) => Ok(None),
        _ => Err(ApiError::BadRequest("give both `width` and `height` or neither".into())),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderRequest {
    pub camera: CameraJson,
    #[serde(default)]
    pub params: Option<ParamsOverride>,
    #[serde(default)]
    pub width: Option<usize>,
    #[serde(default)]
    pub height: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PickRequest {
    pub camera: CameraJson,
    #[serde(default)]
    pub params: Option<ParamsOverride>,
    #[serde(default)]
    pub width: Option<usize>,
    #[serde(default)]
    pub height: Option<usize>,
    #[serde(default, rename = "box")]
    pub rect: Option<[f64; 4]>,
    #[serde(default)]
    pub polygon: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PickReply {
    pub faces: Vec<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyRequest {
    #[serde(default)]
    pub camera: Option<CameraJson>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopRequest {
    /// Also write `path.json` and `key_NNNN.png` here.
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StopReply {
    pub keys: Vec<Keyframe>,
    /// Base64 PNG per key, rendered with the avatar at stop time.
    pub frames: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaveRequest {
    pub path: PathBuf,
}

/// Empty bodies count as `{}` for endpoints whose fields are all optional.
fn parse_optional<T: DeserializeOwned + Default>(body: &[u8]) -> Result<T, ApiError> {
    if body.iter().all(|b| b.is_ascii_whitespace()) {
        Ok(T::default())
    } else {
        parse_json(body)
    }
}

async fn health() -> &'static str {
    "ok"
}

async fn state(State(s): State<AppState>) -> Json<StateReply> {
    Json(s.state())
}

async fn checkpoint(State(s): State<AppState>) -> Result<Response, ApiError> {
    let bytes = s.checkpoint_bytes()?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

async fn render(State(s): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: RenderRequest = parse_json(&body)?;
    let cam = Session::camera(&req.camera, size(req.width, req.height)?)?;
    Ok(png(s.render_png(cam, req.params).await?))
}

async fn pick(State(s): State<AppState>, body: Bytes) -> Result<Json<PickReply>, ApiError> {
    let req: PickRequest = parse_json(&body)?;
    let sel = match (req.rect, req.polygon) {
        (Some(b), None) => Selection::Box(b),
        (None, Some(p)) => Selection::Polygon(p),
        _ => return Err(ApiError::BadRequest("give exactly one of `box` or `polygon`".into())),
    };
    let cam = Session::camera(&req.camera, size(req.width, req.height)?)?;
    Ok(Json(PickReply {
        faces: s.pick(cam, req.params, sel).await?,
    }))
}

async fn edit(State(s): State<AppState>, body: Bytes) -> Result<Json<EditReply>, ApiError> {
    let cmd: EditCommand = parse_json(&body)?;
    Ok(Json(s.edit(cmd).await?))
}

async fn undo(State(s): State<AppState>) -> Result<Json<serde_json::Value>, ApiError> {
    let version = s.undo().await?;
    Ok(Json(serde_json::json!({ "ok": true, "version": version })))
}

async fn params(State(s): State<AppState>, body: Bytes) -> Result<Json<serde_json::Value>, ApiError> {
    let delta: ParamsDelta = parse_json(&body)?;
    let (version, params) = s.set_params(delta).await?;
    Ok(Json(serde_json::json!({ "ok": true, "version": version, "params": params })))
}

async fn record_start(State(s): State<AppState>) -> Json<serde_json::Value> {
    s.record_start();
    Json(serde_json::json!({ "ok": true }))
}

async fn record_key(State(s): State<AppState>, body: Bytes) -> Result<Json<serde_json::Value>, ApiError> {
    let req: KeyRequest = parse_optional(&body)?;
    let n = s.record_key(req.camera)?;
    Ok(Json(serde_json::json!({ "ok": true, "n_keys": n })))
}

async fn record_stop(State(s): State<AppState>, body: Bytes) -> Result<Json<StopReply>, ApiError> {
    let req: StopRequest = parse_optional(&body)?;
    let (keys, pngs) = s.record_stop().await?;
    if let Some(dir) = &req.dir {
        write_recording(dir, &keys, &pngs)?;
    }
    let b64 = base64::engine::general_purpose::STANDARD;
    Ok(Json(StopReply {
        frames: pngs.iter().map(|p| b64.encode(p)).collect(),
        keys,
        dir: req.dir,
    }))
}

fn write_recording(dir: &std::path::Path, keys: &[Keyframe], pngs: &[Vec<u8>]) -> Result<(), ApiError> {
    let io = |e: std::io::Error| ApiError::BadRequest(format!("cannot write recording to {}: {e}", dir.display()));
    std::fs::create_dir_all(dir).map_err(io)?;
    let json = serde_json::to_vec_pretty(keys).map_err(|e| ApiError::Internal(e.to_string()))?;
    std::fs::write(dir.join("path.json"), json).map_err(io)?;
    for (i, p) in pngs.iter().enumerate() {
        std::fs::write(dir.join(format!("key_{i:04}.png")), p).map_err(io)?;
    }
    Ok(())
}

async fn save(State(s): State<AppState>, body: Bytes) -> Result<Json<serde_json::Value>, ApiError> {
    let req: SaveRequest = parse_json(&body)?;
    let n = s.save(&req.path)?;
    Ok(Json(serde_json::json!({ "ok": true, "path": req.path, "bytes": n })))
}

async fn stream(State(s): State<AppState>, ws: WebSocketUpgrade) -> Response {
    // Subscribe before the handshake completes so no state change after the
    // upgrade response can be missed.
    let rx = s.subscribe();
    ws.on_upgrade(move |socket| stream_socket(socket, rx, s))
}

async fn stream_socket(socket: WebSocket, mut rx: broadcast::Receiver<Arc<Vec<u8>>>, s: AppState) {
    let (mut tx, mut incoming) = socket.split();
    match s.current_frame().await {
        Ok(first) => {
            if tx.send(Message::Binary(first.into())).await.is_err() {
                return;
            }
        }
        Err(e) => log::warn!("initial stream frame failed: {e}"),
    }
    loop {
        tokio::select! {
            frame = rx.recv() => match frame {
                Ok(png) => {
                    if tx.send(Message::Binary(Bytes::from(png.as_ref().clone()))).await.is_err() {
                        break;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => log::warn!("stream client skipped {n} frames"),
                Err(broadcast::error::RecvError::Closed) => break,
            },
            msg = incoming.next() => match msg {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => {}
            },
        }
    }
}

pub fn router(session: Arc<Session>) -> Router {
    let v1 = Router::new()
        .route("/health", get(health))
        .route("/state", get(state))
        .route("/checkpoint", get(checkpoint))
        .route("/render", post(render))
        .route("/pick", post(pick))
        .route("/edit", post(edit))
        .route("/undo", post(undo))
        .route("/params", post(params))
        .route("/record/start", post(record_start))
        .route("/record/key", post(record_key))
        .route("/record/stop", post(record_stop))
        .route("/save", post(save))
        .route("/stream", get(stream));
    Router::new().nest("/v1", v1).with_state(session)
}

/// Serve on an already bound listener until the task is dropped.
pub async fn serve_listener(listener: tokio::net::TcpListener, session: Arc<Session>) -> std::io::Result<()> {
    axum::serve(listener, router(session)).await
}

pub async fn serve(addr: SocketAddr, session: Arc<Session>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    serve_listener(listener, session).await
}
