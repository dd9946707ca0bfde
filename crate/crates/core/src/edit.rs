//! Feature-level edits: cross-avatar transfer, color painting by decoder
//! inversion, image stamping and body-parameter control.

use base64::Engine;
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::body::BodyParams;
use crate::decoders::{color_head, color_head_backward, MlpWeights};
use crate::error::{Error, Result};
use crate::pipeline::{avatar_scene, build_scene, Avatar, AvatarContext, Decoded, Scene, SurfelLayers};
use crate::render::{Camera, CameraJson, NEAR};
use crate::train::{adam_step, AdamConfig, AdamState, ParamGroup};

/// Sorted, unique face indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct FaceRegion(Vec<usize>);

impl TryFrom<Vec<usize>> for FaceRegion {
    type Error = std::convert::Infallible;

    fn try_from(mut v: Vec<usize>) -> std::result::Result<Self, Self::Error> {
        v.sort_unstable();
        v.dedup();
        Ok(FaceRegion(v))
    }
}

impl From<FaceRegion> for Vec<usize> {
    fn from(r: FaceRegion) -> Self {
        r.0
    }
}

impl FaceRegion {
    /// Sort and deduplicate `faces`, checking every index against `n_faces`.
    pub fn new(faces: impl IntoIterator<Item = usize>, n_faces: usize) -> Result<Self> {
        let r = FaceRegion::from_unchecked(faces.into_iter().collect());
        r.check(n_faces)?;
        Ok(r)
    }

    pub fn from_unchecked(faces: Vec<usize>) -> Self {
        let Ok(r) = FaceRegion::try_from(faces);
        r
    }

    pub fn all(n_faces: usize) -> Self {
        FaceRegion((0..n_faces).collect())
    }

    pub fn check(&self, n_faces: usize) -> Result<()> {
        match self.0.last() {
            Some(&last) if last >= n_faces => Err(Error::Index {
                index: last,
                len: n_faces,
            }),
            _ => Ok(()),
        }
    }

    fn check_nonempty(&self, n_faces: usize) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::Precondition("edit region is empty".into()));
        }
        self.check(n_faces)
    }

    pub fn faces(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    Geo,
    Tex,
    Both,
}

fn same_architecture(a: &MlpWeights, b: &MlpWeights) -> bool {
    a.w1.dim() == b.w1.dim() && a.w2.dim() == b.w2.dim() && a.activation == b.activation
}

/// Copy feature rows from `src` into a copy of `dst`, pairing the i-th face
/// of `region_src` with the i-th face of `region_dst`.
pub fn transfer_features(
    src: &Avatar,
    dst: &Avatar,
    region_src: &FaceRegion,
    region_dst: &FaceRegion,
    mode: TransferMode,
) -> Result<Avatar> {
    if src.features.k != dst.features.k {
        return Err(Error::Compatibility(format!(
            "feature width differs: source k={}, destination k={}",
            src.features.k, dst.features.k
        )));
    }
    let (sd, dd) = (&src.decoders, &dst.decoders);
    if !(same_architecture(&sd.coarse, &dd.coarse)
        && same_architecture(&sd.fine, &dd.fine)
        && same_architecture(&sd.color, &dd.color)
        && same_architecture(&sd.scale, &dd.scale))
    {
        return Err(Error::Compatibility("decoder architectures differ".into()));
    }
    region_src.check_nonempty(src.n_faces())?;
    region_dst.check_nonempty(dst.n_faces())?;
    if region_src.len() != region_dst.len() {
        return Err(Error::Correspondence {
            src: region_src.len(),
            dst: region_dst.len(),
        });
    }
    let mut out = dst.clone();
    for (&fs, &fd) in region_src.faces().iter().zip(region_dst.faces()) {
        if matches!(mode, TransferMode::Geo | TransferMode::Both) {
            out.features.geo_row_mut(fd).copy_from_slice(src.features.geo_row(fs));
        }
        if matches!(mode, TransferMode::Tex | TransferMode::Both) {
            out.features.tex_row_mut(fd).copy_from_slice(src.features.tex_row(fs));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InvertConfig {
    pub max_steps: usize,
    /// Stop once the mean squared color error falls below this.
    pub tolerance: f64,
    pub lr: f64,
    /// Residuals above this (L-infinity) produce a warning.
    pub warn_linf: f64,
}

impl Default for InvertConfig {
    fn default() -> Self {
        Self {
            max_steps: 500,
            tolerance: 1e-4,
            lr: 0.1,
            warn_linf: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvertReport {
    pub steps: usize,
    pub mse: f64,
    /// Per-face `mean color - target`.
    pub residuals: Vec<[f64; 3]>,
    pub max_abs_error: f64,
    pub warning: Option<String>,
}

/// Mean decoded fine color of each row of `tex` (rows are `[f_tex | enc]`),
/// with the gradient hook for the inversion.
fn mean_colors(w: &MlpWeights, input: &Array2<f64>, n_k: usize) -> Result<(Vec<[f64; 3]>, Array2<f64>, crate::decoders::GradTape)> {
    let (raw, tape) = w.forward_batch(input.view())?;
    let flat = raw.as_slice().expect("contiguous");
    let colors = color_head(flat);
    let means = colors.chunks_exact(n_k).map(crate::decoders::coarse_color).collect();
    Ok((means, raw, tape))
}

/// Optimize the `f_tex` rows of `region` so the mean decoded color of each
/// face approaches its target. The color decoder stays fixed.
pub fn invert_color(
    avatar: &Avatar,
    ctx: &AvatarContext,
    region: &FaceRegion,
    targets: &[[f64; 3]],
    cfg: &InvertConfig,
) -> Result<(Avatar, InvertReport)> {
    region.check_nonempty(avatar.n_faces())?;
    if targets.len() != region.len() {
        return Err(Error::Shape(format!("{} targets for {} faces", targets.len(), region.len())));
    }
    if targets.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(Error::Precondition("target colors must lie in [0, 1]".into()));
    }
    let k = avatar.features.k;
    let n_k = avatar.model.n_k;
    let faces = region.faces();
    let n = faces.len();
    let enc_w = ctx.encodings.ncols();
    let mut input = Array2::zeros((n, k + enc_w));
    for (i, &f) in faces.iter().enumerate() {
        input.slice_mut(s![i, ..k]).assign(&ndarray::aview1(avatar.features.tex_row(f)));
        input.slice_mut(s![i, k..]).assign(&ctx.encodings.slice(s![f, ..]));
    }
    let w = &avatar.decoders.color;
    let mut feats: Vec<f64> = faces.iter().flat_map(|&f| avatar.features.tex_row(f).to_vec()).collect();
    let mut state = AdamState::default();
    let adam = AdamConfig::default();
    let denom = (3 * n) as f64;
    let mut steps = 0;
    let (mut means, mut raw, mut tape) = mean_colors(w, &input, n_k)?;
    loop {
        let mse = means.iter().zip(targets).flat_map(|(m, t)| (0..3).map(move |c| (m[c] - t[c]).powi(2))).sum::<f64>() / denom;
        if mse < cfg.tolerance || steps >= cfg.max_steps {
            break;
        }
        // d mse / d fine color = 2 (mean - target) / (3 n n_k)
        let mut g_colors = Vec::with_capacity(n * n_k);
        for (m, t) in means.iter().zip(targets) {
            let g = [0, 1, 2].map(|c| 2.0 * (m[c] - t[c]) / (denom * n_k as f64));
            g_colors.extend(std::iter::repeat_n(g, n_k));
        }
        let g_raw = color_head_backward(raw.as_slice().expect("contiguous"), &g_colors);
        let g_raw = Array2::from_shape_vec(raw.raw_dim(), g_raw).expect("same shape");
        let mut scratch = w.zero_grads();
        let g_in = w.backward_batch(&tape, g_raw.view(), &mut scratch);
        let g_feat: Vec<f64> = (0..n).flat_map(|i| g_in.slice(s![i, ..k]).to_vec()).collect();
        let mut groups = [ParamGroup {
            name: "f_tex".into(),
            params: &mut feats,
            grads: &g_feat,
            lr: cfg.lr,
            quaternion: false,
        }];
        adam_step(&mut groups, &mut state, &adam)?;
        for i in 0..n {
            input.slice_mut(s![i, ..k]).assign(&ndarray::aview1(&feats[i * k..(i + 1) * k]));
        }
        (means, raw, tape) = mean_colors(w, &input, n_k)?;
        steps += 1;
    }
    let residuals: Vec<[f64; 3]> = means.iter().zip(targets).map(|(m, t)| [0, 1, 2].map(|c| m[c] - t[c])).collect();
    let max_abs_error = residuals.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    let mse = residuals.iter().flatten().map(|v| v * v).sum::<f64>() / denom;
    let warning = (max_abs_error > cfg.warn_linf).then(|| {
        format!("color inversion stopped after {steps} steps with max error {max_abs_error:.4} above {}", cfg.warn_linf)
    });
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    let mut out = avatar.clone();
    if steps > 0 {
        for (i, &f) in faces.iter().enumerate() {
            out.features.tex_row_mut(f).copy_from_slice(&feats[i * k..(i + 1) * k]);
        }
    }
    Ok((
        out,
        InvertReport {
            steps,
            mse,
            residuals,
            max_abs_error,
            warning,
        },
    ))
}

/// An RGB image with `[0, 1]` channels, row-major, interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)
            .map_err(|e| Error::Image {
                path: "<memory>".into(),
                message: e.to_string(),
            })?
            .to_rgb8();
        Ok(Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect(),
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_png_bytes(&bytes).map_err(|e| match e {
            Error::Image { message, .. } => Error::Image {
                path: path.to_path_buf(),
                message,
            },
            e => e,
        })
    }

    fn texel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// `+0.5`). `None` outside the centers' hull.
    pub fn sample(&self, px: f64, py: f64) -> Option<[f64; 3]> {
        let (x, y) = (px - 0.5, py - 0.5);
        if !(x >= 0.0 && y >= 0.0 && x <= (self.width - 1) as f64 && y <= (self.height - 1) as f64) {
            return None;
        }
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let (a, b, c, d) = (self.texel(x0, y0), self.texel(x1, y0), self.texel(x0, y1), self.texel(x1, y1));
        Some([0, 1, 2].map(|i| {
            (a[i] * (1.0 - fx) + b[i] * fx) * (1.0 - fy) + (c[i] * (1.0 - fx) + d[i] * fx) * fy
        }))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StampReport {
    /// Faces that received a target, with the target.
    pub targets: Vec<(usize, [f64; 3])>,
    pub back_facing: Vec<usize>,
    /// Faces none of whose surfels project inside the image.
    pub outside: Vec<usize>,
    pub inversion: Option<InvertReport>,
    pub notices: Vec<String>,
}

/// Per-face target colors from projecting each region face's fine surfels
/// into `image` as seen by `cam`.
pub fn stamp_targets(
    scene: &Scene,
    n_k: usize,
    image: &RgbImage,
    cam: &Camera,
    region: &FaceRegion,
) -> Result<StampReport> {
    if image.width == 0 || image.height == 0 || image.data.len() != 3 * image.width * image.height {
        return Err(Error::Shape("stamp image has inconsistent dimensions".into()));
    }
    if !scene.layers.fine() {
        return Err(Error::Precondition("stamping needs fine surfels".into()));
    }
    region.check_nonempty(scene.frames.len())?;
    let eye = cam.center();
    let mut rep = StampReport::default();
    for &f in region.faces() {
        let fr = &scene.frames[f];
        if fr.normal.dot(&(fr.center - eye)) >= 0.0 {
            rep.back_facing.push(f);
            continue;
        }
        let mut acc = [0.0; 3];
        let mut n = 0usize;
        for k in 0..n_k {
            let p = scene.surfels[scene.n_coarse + f * n_k + k].position;
            let pc = cam.to_camera(&p);
            if pc.z <= NEAR {
                continue;
            }
            let [px, py] = cam.project_camera_point(&pc);
            // Image coordinates are relative to the camera's raster.
            let sx = px * image.width as f64 / cam.width as f64;
            let sy = py * image.height as f64 / cam.height as f64;
            if let Some(c) = image.sample(sx, sy) {
                for i in 0..3 {
                    acc[i] += c[i];
                }
                n += 1;
            }
        }
        if n == 0 {
            rep.outside.push(f);
        } else {
            rep.targets.push((f, acc.map(|v| v / n as f64)));
        }
    }
    if !rep.back_facing.is_empty() {
        rep.notices.push(format!("{} back-facing faces dropped", rep.back_facing.len()));
    }
    if !rep.outside.is_empty() {
        rep.notices.push(format!("{} faces project outside the image", rep.outside.len()));
    }
    Ok(rep)
}

/// Project `image` onto the region as seen by `cam` with the body in
/// `params`, then invert the color decoder towards the sampled colors.
pub fn stamp_texture(
    avatar: &Avatar,
    ctx: &AvatarContext,
    params: &BodyParams,
    image: &RgbImage,
    cam: &Camera,
    region: &FaceRegion,
    cfg: &InvertConfig,
) -> Result<(Avatar, StampReport)> {
    region.check_nonempty(avatar.n_faces())?;
    let scene = avatar_scene(avatar, ctx, params, SurfelLayers::Both)?;
    let mut rep = stamp_targets(&scene, avatar.model.n_k, image, cam, region)?;
    for n in &rep.notices {
        log::info!("stamp: {n}");
    }
    if rep.targets.is_empty() {
        return Ok((avatar.clone(), rep));
    }
    let faces = FaceRegion::from_unchecked(rep.targets.iter().map(|(f, _)| *f).collect());
    let targets: Vec<[f64; 3]> = rep.targets.iter().map(|(_, c)| *c).collect();
    let (out, inv) = invert_color(avatar, ctx, &faces, &targets, cfg)?;
    rep.inversion = Some(inv);
    Ok((out, rep))
}

/// Re-pose the body and re-embed every surfel from already decoded values.
pub fn apply_body_params(avatar: &Avatar, ctx: &AvatarContext, decoded: &Decoded, params: &BodyParams) -> Result<Scene> {
    ctx.body.check_params(params)?;
    if !params.is_finite() {
        return Err(Error::Params("body parameters must be finite".into()));
    }
    build_scene(avatar, ctx, decoded, params, SurfelLayers::Both)
}

/// Edit command envelope: `{"kind": ..., "region": [...], "payload": {...}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditCommand {
    pub kind: EditKind,
    #[serde(default)]
    pub region: Vec<usize>,
    #[serde(default)]
    pub payload: serde_json::Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    Transfer,
    Paint,
    Stamp,
    Shape,
    Pose,
    Expression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferPayload {
    /// Source checkpoint as base64-encoded `GMA1` bytes.
    #[serde(default)]
    pub source_b64: Option<String>,
    #[serde(default)]
    pub source_path: Option<String>,
    /// Source faces; defaults to the destination region.
    #[serde(default)]
    pub source_region: Option<Vec<usize>>,
    pub mode: TransferMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaintPayload {
    /// One color for the whole region.
    #[serde(default)]
    pub color: Option<[f64; 3]>,
    /// One color per region face, in sorted face order.
    #[serde(default)]
    pub colors: Option<Vec<[f64; 3]>>,
    #[serde(default)]
    pub config: Option<InvertConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StampPayload {
    #[serde(default)]
    pub image_png_b64: Option<String>,
    #[serde(default)]
    pub image_path: Option<String>,
    pub camera: CameraJson,
    /// Body parameters the stamp is projected under; defaults to canonical.
    #[serde(default)]
    pub params: Option<BodyParams>,
    #[serde(default)]
    pub config: Option<InvertConfig>,
}

/// New values for some of the canonical body parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsPayload {
    #[serde(default)]
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditOutcome {
    pub changed_faces: Vec<usize>,
    pub notices: Vec<String>,
}

fn payload<T: serde::de::DeserializeOwned>(cmd: &EditCommand) -> Result<T> {
    serde_json::from_value(cmd.payload.clone())
        .map_err(|e| Error::Usage(format!("invalid {:?} payload: {e}", cmd.kind)))
}

fn decode_b64(s: &str) -> Result<Vec<u8>> {
    base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| Error::Usage(format!("invalid base64: {e}")))
}

/// Apply one command to `avatar`, returning the edited copy.
pub fn apply_edit(avatar: &Avatar, ctx: &AvatarContext, cmd: &EditCommand) -> Result<(Avatar, EditOutcome)> {
    let region = FaceRegion::from_unchecked(cmd.region.clone());
    let mut notices = Vec::new();
    let (out, changed) = match cmd.kind {
        EditKind::Transfer => {
            let p: TransferPayload = payload(cmd)?;
            let src = match (&p.source_b64, &p.source_path) {
                (Some(b), None) => crate::persist::from_bytes(&decode_b64(b)?)?,
                (None, Some(path)) => crate::persist::load(std::path::Path::new(path))?,
                _ => return Err(Error::Usage("transfer needs exactly one of source_b64 or source_path".into())),
            };
            let src_region = match p.source_region {
                Some(r) => FaceRegion::from_unchecked(r),
                None => region.clone(),
            };
            let a = transfer_features(&src, avatar, &src_region, &region, p.mode)?;
            (a, region.faces().to_vec())
        }
        EditKind::Paint => {
            let p: PaintPayload = payload(cmd)?;
            let targets = match (p.color, p.colors) {
                (Some(c), None) => vec![c; region.len()],
                (None, Some(cs)) => cs,
                _ => return Err(Error::Usage("paint needs exactly one of color or colors".into())),
            };
            let (a, rep) = invert_color(avatar, ctx, &region, &targets, &p.config.unwrap_or_default())?;
            notices.extend(rep.warning);
            (a, region.faces().to_vec())
        }
        EditKind::Stamp => {
            let p: StampPayload = payload(cmd)?;
            let image = match (&p.image_png_b64, &p.image_path) {
                (Some(b), None) => RgbImage::from_png_bytes(&decode_b64(b)?)?,
                (None, Some(path)) => RgbImage::load(std::path::Path::new(path))?,
                _ => return Err(Error::Usage("stamp needs exactly one of image_png_b64 or image_path".into())),
            };
            let cam = Camera::from_json(&p.camera, Some((image.width, image.height)))?;
            let params = p.params.unwrap_or_else(|| avatar.canonical.clone());
            let (a, rep) = stamp_texture(avatar, ctx, &params, &image, &cam, &region, &p.config.unwrap_or_default())?;
            notices.extend(rep.notices.iter().cloned());
            if let Some(w) = rep.inversion.as_ref().and_then(|i| i.warning.clone()) {
                notices.push(w);
            }
            let changed = if rep.inversion.is_some() { rep.targets.iter().map(|(f, _)| *f).collect() } else { vec![] };
            (a, changed)
        }
        EditKind::Shape | EditKind::Pose | EditKind::Expression => {
            let p: ParamsPayload = payload(cmd)?;
            let mut a = avatar.clone();
            let dst = match cmd.kind {
                EditKind::Shape => &mut a.canonical.beta,
                EditKind::Pose => &mut a.canonical.theta,
                _ => &mut a.canonical.psi,
            };
            if p.values.len() != dst.len() {
                return Err(Error::Params(format!(
                    "{:?} expects {} values, got {}",
                    cmd.kind,
                    dst.len(),
                    p.values.len()
                )));
            }
            if p.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Params("body parameters must be finite".into()));
            }
            dst.copy_from_slice(&p.values);
            (a, vec![])
        }
    };
    Ok((
        out,
        EditOutcome {
            changed_faces: changed,
            notices,
        },
    ))
}
