//! Session state: one avatar, a writer queue and immutable snapshots.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, mpsc};

use gma_core::body::BodyParams;
use gma_core::edit::{apply_body_params, apply_edit, EditCommand, EditKind, EditOutcome};
use gma_core::pipeline::{decode, Avatar, AvatarContext, DecodeSet, Decoded};
use gma_core::render::{color_to_rgb8, encode_png, pick_faces, render, Camera, CameraJson, RenderOutput, Selection};
use gma_core::synth::OrbitSpec;

use crate::error::ApiError;

pub const UNDO_DEPTH: usize = 16;
pub const STREAM_CAPACITY: usize = 64;
pub const MAX_IMAGE_SIDE: usize = 4096;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub background: [f64; 3],
    /// Size of the streamed view before any /render sets a camera.
    pub view_size: (usize, usize),
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            background: [1.0; 3],
            view_size: (256, 256),
        }
    }
}

/// Immutable state readers render from.
pub struct Snapshot {
    pub avatar: Avatar,
    pub ctx: Arc<AvatarContext>,
    pub decoded: Arc<Decoded>,
    pub params: BodyParams,
    pub version: u64,
}

impl Snapshot {
    fn decode(avatar: Avatar, ctx: Arc<AvatarContext>, params: BodyParams, version: u64) -> gma_core::Result<Self> {
        let decoded = Arc::new(decode(&avatar, &ctx, DecodeSet::ALL)?);
        Ok(Self {
            avatar,
            ctx,
            decoded,
            params,
            version,
        })
    }

    pub fn render(&self, cam: &Camera, params: Option<&BodyParams>, background: [f64; 3]) -> gma_core::Result<RenderOutput> {
        let scene = apply_body_params(&self.avatar, &self.ctx, &self.decoded, params.unwrap_or(&self.params))?;
        Ok(render(&scene.surfels, cam, background))
    }

    pub fn render_png(&self, cam: &Camera, params: Option<&BodyParams>, background: [f64; 3]) -> gma_core::Result<Vec<u8>> {
        let out = self.render(cam, params, background)?;
        encode_png(&color_to_rgb8(&out), out.width, out.height, 3)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Keyframe {
    pub camera: CameraJson,
    pub params: BodyParams,
}

#[derive(Default)]
struct Recording {
    active: bool,
    keys: Vec<Keyframe>,
}

/// Absolute replacement of some body parameter vectors.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsOverride {
    #[serde(default)]
    pub beta: Option<Vec<f64>>,
    #[serde(default)]
    pub theta: Option<Vec<f64>>,
    #[serde(default)]
    pub psi: Option<Vec<f64>>,
}

/// `/params` body: additive deltas, optionally after a reset to canonical.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsDelta {
    #[serde(default)]
    pub beta: Option<Vec<f64>>,
    #[serde(default)]
    pub theta: Option<Vec<f64>>,
    #[serde(default)]
    pub psi: Option<Vec<f64>>,
    #[serde(default)]
    pub reset: bool,
}

fn check_vec(name: &str, v: &[f64], len: usize) -> Result<(), ApiError> {
    if v.len() != len {
        return Err(ApiError::BadRequest(format!("`{name}` has {} values, expected {len}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(ApiError::BadRequest(format!("`{name}` contains non-finite values")));
    }
    Ok(())
}

impl ParamsOverride {
    pub fn apply(&self, base: &BodyParams) -> Result<BodyParams, ApiError> {
        let mut p = base.clone();
        for (name, src, dst) in [
            ("beta", &self.beta, &mut p.beta),
            ("theta", &self.theta, &mut p.theta),
            ("psi", &self.psi, &mut p.psi),
        ] {
            if let Some(v) = src {
                check_vec(name, v, dst.len())?;
                dst.clone_from(v);
            }
        }
        Ok(p)
    }
}

impl ParamsDelta {
    pub fn apply(&self, current: &BodyParams, canonical: &BodyParams) -> Result<BodyParams, ApiError> {
        let mut p = if self.reset { canonical.clone() } else { current.clone() };
        for (name, src, dst) in [
            ("beta", &self.beta, &mut p.beta),
            ("theta", &self.theta, &mut p.theta),
            ("psi", &self.psi, &mut p.psi),
        ] {
            if let Some(v) = src {
                check_vec(name, v, dst.len())?;
                for (d, x) in dst.iter_mut().zip(v) {
                    *d += x;
                }
            }
        }
        Ok(p)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EditReply {
    pub ok: bool,
    pub changed_faces: Vec<usize>,
    pub notices: Vec<String>,
    pub version: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StateReply {
    pub version: u64,
    pub n_faces: usize,
    pub k: usize,
    pub offset_mode: gma_core::gma::OffsetMode,
    pub params: BodyParams,
    pub canonical: BodyParams,
    pub undo_depth: usize,
    pub recording: bool,
    pub n_keys: usize,
    pub view: CameraJson,
}

pub struct Session {
    current: RwLock<Arc<Snapshot>>,
    /// Held for the whole of every state change; tokio's mutex is FIFO.
    writer: tokio::sync::Mutex<VecDeque<Arc<Snapshot>>>,
    undo_len: Mutex<usize>,
    recording: Mutex<Recording>,
    view: Arc<Mutex<Camera>>,
    frames: broadcast::Sender<Arc<Vec<u8>>>,
    changes: mpsc::UnboundedSender<Arc<Snapshot>>,
    pub config: ServiceConfig,
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(format!("worker failed: {e}")))
}

impl Session {
    /// Start a session and its frame streamer. Must run inside a tokio runtime.
    pub fn start(avatar: Avatar, config: ServiceConfig) -> gma_core::Result<Arc<Self>> {
        let ctx = Arc::new(AvatarContext::new(&avatar)?);
        let params = avatar.canonical.clone();
        let snap = Arc::new(Snapshot::decode(avatar, ctx, params, 0)?);
        let (w, h) = config.view_size;
        let view = Arc::new(Mutex::new(OrbitSpec::default().camera(0, 1, w, h)?));
        let (frames, _) = broadcast::channel(STREAM_CAPACITY);
        let (changes, rx) = mpsc::unbounded_channel();
        tokio::spawn(stream_frames(rx, frames.clone(), view.clone(), config.background));
        Ok(Arc::new(Self {
            current: RwLock::new(snap),
            writer: tokio::sync::Mutex::new(VecDeque::new()),
            undo_len: Mutex::new(0),
            recording: Mutex::new(Recording::default()),
            view,
            frames,
            changes,
            config,
        }))
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.current.read().expect("snapshot lock").clone()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Arc<Vec<u8>>> {
        self.frames.subscribe()
    }

    pub fn view(&self) -> Camera {
        self.view.lock().expect("view lock").clone()
    }

    fn set_view(&self, cam: &Camera) {
        *self.view.lock().expect("view lock") = cam.clone();
    }

    fn publish(&self, snap: Arc<Snapshot>) {
        *self.current.write().expect("snapshot lock") = snap.clone();
        // The streamer only goes away with the runtime.
        let _ = self.changes.send(snap);
    }

    pub fn state(&self) -> StateReply {
        let s = self.snapshot();
        let rec = self.recording.lock().expect("recording lock");
        StateReply {
            version: s.version,
            n_faces: s.avatar.n_faces(),
            k: s.avatar.model.k,
            offset_mode: s.avatar.model.offset_mode,
            params: s.params.clone(),
            canonical: s.avatar.canonical.clone(),
            undo_depth: *self.undo_len.lock().expect("undo lock"),
            recording: rec.active,
            n_keys: rec.keys.len(),
            view: self.view().to_json(),
        }
    }

    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>, ApiError> {
        gma_core::persist::to_bytes(&self.snapshot().avatar).map_err(ApiError::internal)
    }

    pub fn save(&self, path: &Path) -> Result<usize, ApiError> {
        let bytes = self.checkpoint_bytes()?;
        std::fs::write(path, &bytes).map_err(|e| ApiError::BadRequest(format!("cannot write {}: {e}", path.display())))?;
        Ok(bytes.len())
    }

    /// Resolve a request camera at an optional explicit size.
    pub fn camera(j: &CameraJson, size: Option<(usize, usize)>) -> Result<Camera, ApiError> {
        if let Some((w, h)) = size {
            if w == 0 || h == 0 || w > MAX_IMAGE_SIDE || h > MAX_IMAGE_SIDE {
                return Err(ApiError::BadRequest(format!("image size {w}x{h} out of range")));
            }
        }
        let cam = Camera::from_json(j, size).map_err(ApiError::bad_request)?;
        match size {
            Some((w, h)) if (w, h) != (cam.width, cam.height) => cam.with_size(w, h).map_err(ApiError::bad_request),
            _ => Ok(cam),
        }
    }

    pub async fn render_png(&self, cam: Camera, params: Option<ParamsOverride>) -> Result<Vec<u8>, ApiError> {
        let snap = self.snapshot();
        let params = params.map(|p| p.apply(&snap.params)).transpose()?;
        self.set_view(&cam);
        let bg = self.config.background;
        blocking(move || snap.render_png(&cam, params.as_ref(), bg)).await?.map_err(ApiError::bad_request)
    }

    pub async fn pick(&self, cam: Camera, params: Option<ParamsOverride>, sel: Selection) -> Result<Vec<usize>, ApiError> {
        let snap = self.snapshot();
        let params = params.map(|p| p.apply(&snap.params)).transpose()?;
        let bg = self.config.background;
        let out = blocking(move || snap.render(&cam, params.as_ref(), bg)).await?.map_err(ApiError::bad_request)?;
        Ok(pick_faces(&out, &sel))
    }

    fn push_undo(&self, stack: &mut VecDeque<Arc<Snapshot>>, prev: Arc<Snapshot>) {
        stack.push_back(prev);
        while stack.len() > UNDO_DEPTH {
            stack.pop_front();
        }
        *self.undo_len.lock().expect("undo lock") = stack.len();
    }

    pub async fn edit(&self, cmd: EditCommand) -> Result<EditReply, ApiError> {
        let mut stack = self.writer.lock().await;
        let cur = self.snapshot();
        let prev = cur.clone();
        let kind = cmd.kind;
        let (next, outcome) = blocking(move || -> gma_core::Result<(Snapshot, EditOutcome)> {
            let (avatar, outcome) = apply_edit(&cur.avatar, &cur.ctx, &cmd)?;
            let params = match kind {
                EditKind::Shape | EditKind::Pose | EditKind::Expression => avatar.canonical.clone(),
                _ => cur.params.clone(),
            };
            Ok((Snapshot::decode(avatar, cur.ctx.clone(), params, cur.version + 1)?, outcome))
        })
        .await?
        .map_err(|e| ApiError::Conflict(e.to_string()))?;
        let version = next.version;
        self.push_undo(&mut stack, prev);
        self.publish(Arc::new(next));
        log::info!("edit {kind:?} applied as version {version}");
        Ok(EditReply {
            ok: true,
            changed_faces: outcome.changed_faces,
            notices: outcome.notices,
            version,
        })
    }

    /// Restore the avatar and body parameters from before the last edit.
    pub async fn undo(&self) -> Result<u64, ApiError> {
        let mut stack = self.writer.lock().await;
        let prev = stack.pop_back().ok_or_else(|| ApiError::Conflict("nothing to undo".into()))?;
        *self.undo_len.lock().expect("undo lock") = stack.len();
        let version = self.snapshot().version + 1;
        self.publish(Arc::new(Snapshot {
            avatar: prev.avatar.clone(),
            ctx: prev.ctx.clone(),
            decoded: prev.decoded.clone(),
            params: prev.params.clone(),
            version,
        }));
        Ok(version)
    }

    pub async fn set_params(&self, delta: ParamsDelta) -> Result<(u64, BodyParams), ApiError> {
        let _guard = self.writer.lock().await;
        let cur = self.snapshot();
        let params = delta.apply(&cur.params, &cur.avatar.canonical)?;
        cur.ctx.body.check_params(&params).map_err(ApiError::bad_request)?;
        let version = cur.version + 1;
        self.publish(Arc::new(Snapshot {
            avatar: cur.avatar.clone(),
            ctx: cur.ctx.clone(),
            decoded: cur.decoded.clone(),
            params: params.clone(),
            version,
        }));
        Ok((version, params))
    }

    pub fn record_start(&self) {
        let mut rec = self.recording.lock().expect("recording lock");
        rec.active = true;
        rec.keys.clear();
    }

    /// Capture a keyframe at `camera` (default: the current view) and the
    /// current body parameters.
    pub fn record_key(&self, camera: Option<CameraJson>) -> Result<usize, ApiError> {
        let camera = match camera {
            Some(j) => {
                let cam = Self::camera(&j, None)?;
                cam.to_json()
            }
            None => self.view().to_json(),
        };
        let params = self.snapshot().params.clone();
        let mut rec = self.recording.lock().expect("recording lock");
        if !rec.active {
            return Err(ApiError::Conflict("no recording in progress".into()));
        }
        rec.keys.push(Keyframe { camera, params });
        Ok(rec.keys.len())
    }

    /// Stop recording and render every keyframe with the current avatar.
    pub async fn record_stop(&self) -> Result<(Vec<Keyframe>, Vec<Vec<u8>>), ApiError> {
        let keys = {
            let mut rec = self.recording.lock().expect("recording lock");
            if !rec.active {
                return Err(ApiError::Conflict("no recording in progress".into()));
            }
            rec.active = false;
            std::mem::take(&mut rec.keys)
        };
        let snap = self.snapshot();
        let bg = self.config.background;
        let k = keys.clone();
        let pngs = blocking(move || -> gma_core::Result<Vec<Vec<u8>>> {
            k.iter()
                .map(|key| {
                    let cam = Camera::from_json(&key.camera, None)?;
                    snap.render_png(&cam, Some(&key.params), bg)
                })
                .collect()
        })
        .await?
        .map_err(ApiError::internal)?;
        Ok((keys, pngs))
    }

    /// PNG of the current state at the view camera.
    pub async fn current_frame(&self) -> Result<Vec<u8>, ApiError> {
        let snap = self.snapshot();
        let cam = self.view();
        let bg = self.config.background;
        blocking(move || snap.render_png(&cam, None, bg)).await?.map_err(ApiError::internal)
    }
}

/// Render one frame per state change, in order, and fan it out.
async fn stream_frames(
    mut rx: mpsc::UnboundedReceiver<Arc<Snapshot>>,
    frames: broadcast::Sender<Arc<Vec<u8>>>,
    view: Arc<Mutex<Camera>>,
    background: [f64; 3],
) {
    while let Some(snap) = rx.recv().await {
        if frames.receiver_count() == 0 {
            continue;
        }
        let cam = view.lock().expect("view lock").clone();
        let version = snap.version;
        match tokio::task::spawn_blocking(move || snap.render_png(&cam, None, background)).await {
            Ok(Ok(png)) => {
                let _ = frames.send(Arc::new(png));
            }
            Ok(Err(e)) => log::warn!("stream render of version {version} failed: {e}"),
            Err(e) => log::warn!("stream worker failed: {e}"),
        }
    }
}
