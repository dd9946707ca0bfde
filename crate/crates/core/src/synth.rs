//! Synthetic ground truth: a hand-built avatar on the procedural body,
//! animated on a camera orbit and written out as a frame dataset.
//!
//! The reference subject is a regular [`Avatar`] whose decoder weights are
//! set by construction instead of learned, so a fit against its frames is a
//! realizable problem and the subject checkpoint itself evaluates at the
//! PSNR cap.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body::{BodyConfig, BodyParams, PartKind};
use crate::decoders::{Activation, MlpWeights, HIDDEN};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::gma::{ModelConfig, OffsetMode};
use crate::pipeline::{avatar_scene, Avatar, AvatarContext, SurfelLayers};
use crate::render::{color_to_rgb8, render, write_png, Camera, CameraJson, RenderOutput};

pub const MANIFEST_VERSION: u32 = 1;
pub const SUBJECT_FILE: &str = "subject.gma";

/// Fine-surfel barycentrics `(u, v, w)` of the reference subject.
const FINE_LAYOUT: [[f64; 3]; 6] = [
    [0.6, 0.2, 0.2],
    [0.2, 0.6, 0.2],
    [0.2, 0.2, 0.6],
    [0.4, 0.4, 0.2],
    [0.2, 0.4, 0.4],
    [0.4, 0.2, 0.4],
];
/// Raw scale logit of the reference fine surfels (factor ~0.5 of `s_f`).
const FINE_SCALE_RAW: f64 = -0.7;
/// Checker cells are darkened by this factor.
const CHECKER_DARK: f64 = 0.6;

/// Surface pattern painted on the reference subject.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TextureSpec {
    Solid,
    /// Alternating cells of `n` bands by `n` segments.
    Checker(u32),
    /// Alternating rings of `n` bands.
    Stripes(u32),
}

impl Default for TextureSpec {
    fn default() -> Self {
        TextureSpec::Checker(2)
    }
}

impl fmt::Display for TextureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TextureSpec::Solid => write!(f, "solid"),
            TextureSpec::Checker(n) => write!(f, "checker({n})"),
            TextureSpec::Stripes(n) => write!(f, "stripes({n})"),
        }
    }
}

impl FromStr for TextureSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "solid" {
            return Ok(TextureSpec::Solid);
        }
        let parse = |name: &str| -> Option<u32> {
            s.strip_prefix(name)?.strip_prefix('(')?.strip_suffix(')')?.trim().parse().ok()
        };
        let spec = if let Some(n) = parse("checker") {
            TextureSpec::Checker(n)
        } else if let Some(n) = parse("stripes") {
            TextureSpec::Stripes(n)
        } else {
            return Err(Error::Config(format!("unknown texture spec {s:?}")));
        };
        match spec {
            TextureSpec::Checker(0) | TextureSpec::Stripes(0) => {
                Err(Error::Config(format!("texture cell size must be >= 1 in {s:?}")))
            }
            _ => Ok(spec),
        }
    }
}

impl TextureSpec {
    /// Whether a cell is drawn in the dark variant of its part color.
    pub fn is_dark(&self, band: usize, segment: usize) -> bool {
        match *self {
            TextureSpec::Solid => false,
            TextureSpec::Checker(n) => (band / n as usize + segment / n as usize) % 2 == 1,
            TextureSpec::Stripes(n) => (band / n as usize) % 2 == 1,
        }
    }
}

/// The reference subject: its avatar plus the per-face ground truth used to
/// build it.
#[derive(Clone, Debug)]
pub struct Subject {
    pub avatar: Avatar,
    pub texture: TextureSpec,
    /// Shape coefficients the subject is rendered with.
    pub beta: Vec<f64>,
    /// Per-face color before decoding.
    pub face_colors: Vec<[f64; 3]>,
    /// Per-face normal offset before decoding.
    pub face_offsets: Vec<f64>,
}

fn part_base_color(kind: PartKind) -> [f64; 3] {
    match kind {
        PartKind::Torso => [0.20, 0.40, 0.80],
        PartKind::Head => [0.90, 0.72, 0.60],
        PartKind::UpperArm => [0.85, 0.35, 0.25],
        PartKind::LowerArm => [0.90, 0.70, 0.55],
        PartKind::UpperLeg => [0.25, 0.25, 0.30],
        PartKind::LowerLeg => [0.45, 0.30, 0.20],
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Weights for which `GELU(x) - GELU(-x)` (or the ReLU analogue) passes
/// `feature[src[i]]` straight through to output `dst[i]`; everything else
/// comes from the output bias.
fn passthrough(input: usize, output: usize, act: Activation, routes: &[(usize, usize)], bias: &[f64]) -> MlpWeights {
    let mut w = MlpWeights::zeros(input, HIDDEN, output, act);
    assert!(2 * routes.len() <= HIDDEN);
    for (i, &(src, dst)) in routes.iter().enumerate() {
        w.w1[(2 * i, src)] = 1.0;
        w.w1[(2 * i + 1, src)] = -1.0;
        w.w2[(dst, 2 * i)] = 1.0;
        w.w2[(dst, 2 * i + 1)] = -1.0;
    }
    w.b2.iter_mut().zip(bias).for_each(|(b, v)| *b = *v);
    w
}

/// Build the reference subject. Deterministic in `(body_config, texture, seed)`.
pub fn generate_subject(body_config: &BodyConfig, texture: TextureSpec, seed: u64) -> Result<Subject> {
    if let TextureSpec::Checker(0) | TextureSpec::Stripes(0) = texture {
        return Err(Error::Config("texture cell size must be >= 1".into()));
    }
    let model = ModelConfig {
        offset_mode: OffsetMode::Normal,
        n_k: FINE_LAYOUT.len(),
        ..ModelConfig::default()
    };
    let mut avatar = Avatar::init(body_config, &model, seed)?;
    let ctx = AvatarContext::new(&avatar)?;
    let body = &ctx.body;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5AB1);

    let part_colors: Vec<[f64; 3]> = body
        .parts
        .iter()
        .map(|p| part_base_color(p.kind).map(|c| (c + rng.random_range(-0.05..0.05)).clamp(0.1, 0.9)))
        .collect();

    let n_f = body.n_faces();
    let mut face_colors = Vec::with_capacity(n_f);
    let mut face_offsets = Vec::with_capacity(n_f);
    for (fi, f) in body.faces.iter().enumerate() {
        let cell = body.face_cells[fi];
        let base = part_colors[cell.part];
        let dark = texture.is_dark(cell.band, cell.segment);
        face_colors.push(base.map(|c| if dark { (c * CHECKER_DARK).max(0.08) } else { c }));
        let c: Vec3 = (body.template_vertices[f[0]] + body.template_vertices[f[1]] + body.template_vertices[f[2]]) / 3.0;
        let o = match body.parts[cell.part].kind {
            PartKind::Torso => 0.012 + 0.012 * (2.0 * std::f64::consts::PI * c.y / 0.45).sin(),
            PartKind::Head => 0.0,
            _ => 0.008,
        };
        face_offsets.push(o);
    }

    // Features: f_geo[0] carries the offset logit, f_tex[0..3] the color logits.
    let k = model.k;
    avatar.features.geo.iter_mut().for_each(|v| *v = 0.0);
    avatar.features.tex.iter_mut().for_each(|v| *v = 0.0);
    for fi in 0..n_f {
        avatar.features.geo[fi * k] = (face_offsets[fi] / model.max_offset).atanh();
        for c in 0..3 {
            avatar.features.tex[fi * k + c] = logit(face_colors[fi][c]);
        }
    }

    let d_in = model.decoder_input_dim();
    let n_k = model.n_k;
    let fine_bias: Vec<f64> = FINE_LAYOUT
        .iter()
        .flat_map(|[u, v, w]| [(u / w).ln(), (v / w).ln(), 0.0])
        .collect();
    let color_routes: Vec<(usize, usize)> = (0..n_k).flat_map(|s| (0..3).map(move |c| (c, 3 * s + c))).collect();
    avatar.decoders.coarse = passthrough(d_in, 1, Activation::Gelu, &[(0, 0)], &[0.0]);
    avatar.decoders.fine = passthrough(d_in, 3 * n_k, Activation::Gelu, &[], &fine_bias);
    avatar.decoders.color = passthrough(d_in, 3 * n_k, Activation::Relu, &color_routes, &[]);
    avatar.decoders.scale = passthrough(d_in, 2 * n_k, Activation::Relu, &[], &vec![FINE_SCALE_RAW; 2 * n_k]);

    let beta = subject_beta(body_config.n_shape);
    avatar.canonical.beta = beta.clone();
    avatar.meta.notes.push(format!("reference subject, texture {texture}"));
    let avatar = avatar.quantized();
    avatar.check()?;
    Ok(Subject {
        avatar,
        texture,
        beta,
        face_colors,
        face_offsets,
    })
}

fn subject_beta(n_shape: usize) -> Vec<f64> {
    let mut b = vec![0.0; n_shape];
    b[0] = 0.3;
    b[1] = -0.2;
    b[2] = 0.25;
    b
}

/// Camera orbit around the subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrbitSpec {
    pub radius: f64,
    /// Height of the camera above the look-at target.
    pub elevation: f64,
    pub target: [f64; 3],
    /// Focal length in pixels at a 128-pixel image height.
    pub focal_128: f64,
}

impl Default for OrbitSpec {
    fn default() -> Self {
        Self {
            radius: 3.0,
            elevation: 0.3,
            target: [0.0, -0.06, 0.0],
            focal_128: 175.0,
        }
    }
}

impl OrbitSpec {
    pub fn camera(&self, t: usize, n_frames: usize, width: usize, height: usize) -> Result<Camera> {
        let a = 2.0 * std::f64::consts::PI * t as f64 / n_frames as f64;
        let target = Vec3::from(self.target);
        let eye = target + Vec3::new(self.radius * a.sin(), self.elevation, self.radius * a.cos());
        let f = self.focal_128 * height as f64 / 128.0;
        Camera::look_at(eye, target, Vec3::y(), f, f, width, height)
    }
}

/// Pose sequence: arm and elbow swing plus a talking expression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionSpec {
    /// Shoulder swing amplitude, radians.
    pub arm_swing: f64,
    /// Elbow bend amplitude, radians.
    pub elbow_bend: f64,
    /// Amplitude of the first expression coefficient.
    pub expression: f64,
    /// Motion cycles over the whole sequence.
    pub cycles: f64,
}

impl Default for MotionSpec {
    fn default() -> Self {
        Self {
            arm_swing: 0.35,
            elbow_bend: 0.3,
            expression: 0.6,
            cycles: 2.0,
        }
    }
}

impl MotionSpec {
    pub fn params(&self, subject: &Subject, t: usize, n_frames: usize) -> BodyParams {
        let cfg = &subject.avatar.body_config;
        let mut p = BodyParams::zeros(cfg.n_shape, cfg.n_joints, cfg.n_expr);
        p.beta = subject.beta.clone();
        let phase = 2.0 * std::f64::consts::PI * self.cycles * t as f64 / n_frames as f64;
        let s = phase.sin();
        let (shoulders, elbows): (&[usize], &[usize]) = if cfg.n_joints == 13 { (&[5, 7], &[6, 8]) } else { (&[3, 4], &[]) };
        for (i, &j) in shoulders.iter().enumerate() {
            let sign = if i == 0 { 1.0 } else { -1.0 };
            p.set_joint_rotation(j, Vec3::new(sign * self.arm_swing * s, 0.0, 0.0));
        }
        for &j in elbows {
            p.set_joint_rotation(j, Vec3::new(-self.elbow_bend * 0.5 * (1.0 + s), 0.0, 0.0));
        }
        p.psi[0] = self.expression * (0.5 * phase).sin();
        p
    }
}

/// Which frames a consumer wants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Holdout,
    All,
}

/// Every eighth frame is held out.
pub fn is_holdout(index: usize) -> bool {
    index % 8 == 7
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub rgb: String,
    pub mask: String,
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
    pub psi: Vec<f64>,
    pub camera: CameraJson,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    /// `[width, height]`.
    pub resolution: [usize; 2],
    pub n_frames: usize,
    pub seed: u64,
    pub body_config: BodyConfig,
    pub background: [f64; 3],
    pub frames: Vec<FrameEntry>,
}

/// One supervised frame; images are `[0, 1]` floats decoded from 8-bit data.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub params: BodyParams,
    pub camera: Camera,
    /// Interleaved RGB, `width * height * 3`.
    pub rgb: Vec<f64>,
    /// `0` or `1` per pixel.
    pub mask: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub body_config: BodyConfig,
    pub background: [f64; 3],
    pub frames: Vec<Frame>,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.frames.len())
            .filter(|&i| match split {
                Split::All => true,
                Split::Train => !is_holdout(i),
                Split::Holdout => is_holdout(i),
            })
            .collect()
    }

    pub fn frames_of(&self, split: Split) -> Vec<&Frame> {
        self.indices(split).into_iter().map(|i| &self.frames[i]).collect()
    }

    fn rgb_name(i: usize) -> String {
        format!("rgb_{i:04}.png")
    }

    fn mask_name(i: usize) -> String {
        format!("mask_{i:04}.png")
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            version: MANIFEST_VERSION,
            resolution: [self.width, self.height],
            n_frames: self.frames.len(),
            seed: self.seed,
            body_config: self.body_config.clone(),
            background: self.background,
            frames: self
                .frames
                .iter()
                .map(|f| {
                    let mut camera = f.camera.to_json();
                    camera.width = None;
                    camera.height = None;
                    FrameEntry {
                        rgb: Self::rgb_name(f.index),
                        mask: Self::mask_name(f.index),
                        beta: f.params.beta.clone(),
                        theta: f.params.theta.clone(),
                        psi: f.params.psi.clone(),
                        camera,
                    }
                })
                .collect(),
        }
    }

    /// Write PNGs and `manifest.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for f in &self.frames {
            let rgb: Vec<u8> = f.rgb.iter().map(|v| crate::render::to_u8(*v)).collect();
            write_png(&dir.join(Self::rgb_name(f.index)), &rgb, self.width, self.height, 3)?;
            let mask: Vec<u8> = f.mask.iter().map(|&m| if m >= 0.5 { 255 } else { 0 }).collect();
            write_png(&dir.join(Self::mask_name(f.index)), &mask, self.width, self.height, 1)?;
        }
        let path = dir.join("manifest.json");
        let json = serde_json::to_vec_pretty(&self.manifest())?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

/// Frame-generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderSpec {
    pub n_frames: usize,
    pub width: usize,
    pub height: usize,
    pub background: [f64; 3],
    pub orbit: OrbitSpec,
    pub motion: MotionSpec,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            n_frames: 48,
            width: 128,
            height: 128,
            background: [1.0, 1.0, 1.0],
            orbit: OrbitSpec::default(),
            motion: MotionSpec::default(),
        }
    }
}

/// Frame `t` of the subject as the dataset stores it.
pub fn render_frame(subject: &Subject, ctx: &AvatarContext, spec: &RenderSpec, t: usize) -> Result<(Frame, RenderOutput)> {
    let cam = spec.orbit.camera(t, spec.n_frames, spec.width, spec.height)?;
    let params = spec.motion.params(subject, t, spec.n_frames);
    let scene = avatar_scene(&subject.avatar, ctx, &params, SurfelLayers::Both)?;
    let out = render(&scene.surfels, &cam, spec.background);
    let rgb = color_to_rgb8(&out).into_iter().map(|b| b as f64 / 255.0).collect();
    let mask = out.alpha.iter().map(|&a| if a >= 0.5 { 1.0 } else { 0.0 }).collect();
    Ok((
        Frame {
            index: t,
            params,
            camera: cam,
            rgb,
            mask,
        },
        out,
    ))
}

/// Render the subject's frames in memory.
pub fn synthesize(subject: &Subject, spec: &RenderSpec, seed: u64) -> Result<Dataset> {
    if spec.n_frames == 0 {
        return Err(Error::Config("n_frames must be >= 1".into()));
    }
    if spec.width == 0 || spec.height == 0 {
        return Err(Error::Config("resolution must be positive".into()));
    }
    let ctx = AvatarContext::new(&subject.avatar)?;
    let frames = (0..spec.n_frames)
        .into_par_iter()
        .map(|t| render_frame(subject, &ctx, spec, t).map(|(f, _)| f))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        width: spec.width,
        height: spec.height,
        seed,
        body_config: subject.avatar.body_config.clone(),
        background: spec.background,
        frames,
    })
}

/// Render the subject's frames and write the dataset plus the subject
/// checkpoint to `dir`.
pub fn render_dataset(subject: &Subject, spec: &RenderSpec, seed: u64, dir: &Path) -> Result<Dataset> {
    let ds = synthesize(subject, spec, seed)?;
    ds.write(dir)?;
    crate::persist::save(&subject.avatar, &dir.join(SUBJECT_FILE))?;
    Ok(ds)
}

fn read_png(path: &Path, channels: usize, w: usize, h: usize) -> Result<Vec<f64>> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        e => Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        },
    })?;
    if img.width() as usize != w || img.height() as usize != h {
        return Err(Error::Dataset(format!(
            "{} is {}x{}, manifest says {w}x{h}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    let raw = if channels == 3 { img.to_rgb8().into_raw() } else { img.to_luma8().into_raw() };
    Ok(raw.into_iter().map(|b| b as f64 / 255.0).collect())
}

/// Load and validate a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath: PathBuf = dir.join("manifest.json");
    let text = std::fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: Manifest = serde_json::from_slice(&text)
        .map_err(|e| Error::Dataset(format!("{}: {e}", mpath.display())))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Dataset(format!("{}: unsupported version {}", mpath.display(), m.version)));
    }
    if m.frames.len() != m.n_frames || m.n_frames == 0 {
        return Err(Error::Dataset(format!(
            "{}: n_frames is {} but {} frames are listed",
            mpath.display(),
            m.n_frames,
            m.frames.len()
        )));
    }
    m.body_config.validate()?;
    let [w, h] = m.resolution;
    let n_joints = m.body_config.n_joints;
    let frames = m
        .frames
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let params = BodyParams {
                beta: e.beta.clone(),
                theta: e.theta.clone(),
                psi: e.psi.clone(),
            };
            if params.beta.len() != m.body_config.n_shape
                || params.theta.len() != 3 * n_joints
                || params.psi.len() != m.body_config.n_expr
                || !params.is_finite()
            {
                return Err(Error::Dataset(format!("frame {i}: body parameters do not match the body config")));
            }
            let camera = Camera::from_json(&e.camera, Some((w, h)))
                .map_err(|err| Error::Dataset(format!("frame {i}: {err}")))?;
            let rgb = read_png(&dir.join(&e.rgb), 3, w, h)?;
            let mask = read_png(&dir.join(&e.mask), 1, w, h)?
                .into_iter()
                .map(|v| if v >= 0.5 { 1.0 } else { 0.0 })
                .collect();
            Ok(Frame {
                index: i,
                params,
                camera,
                rgb,
                mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        width: w,
        height: h,
        seed: m.seed,
        body_config: m.body_config,
        background: m.background,
        frames,
    })
}

/// Small body used by fast tests and examples.
pub fn small_body_config() -> BodyConfig {
    BodyConfig {
        limb_segments: 5,
        limb_rings: 3,
        torso_segments: 8,
        torso_rings: 5,
        head_segments: 6,
        head_rings: 4,
        ..BodyConfig::default()
    }
}
