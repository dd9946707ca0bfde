//! Differentiable surfel splatting.
//!
//! Cameras follow the pinhole convention x right, y down, z forward; pixel
//! `(x, y)` samples the image plane at `(x + 0.5, y + 0.5)`. Every surfel is
//! opaque at its center, so its per-pixel alpha is the Gaussian weight itself.

use std::io::Write as _;
use std::path::Path;

use nalgebra::{Matrix2, Matrix2x3, Matrix3x2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{quat_matrix_backward, quat_to_matrix, Mat3, Vec3};
use crate::gma::Surfel;

/// Surfels closer than this (camera z, meters) are culled.
pub const NEAR: f64 = 0.01;
/// Per-surfel alpha below this is ignored.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// A pixel stops accumulating once transmittance drops below this.
pub const T_MIN: f64 = 1e-4;
/// Isotropic screen-space blur (px^2) added to every projected covariance.
pub const DILATION: f64 = 0.3;
/// Projected covariances above this condition number are skipped.
pub const MAX_CONDITION: f64 = 1e8;
pub const TILE: usize = 16;

/// Feature channels composited per pixel: rgb, depth, camera normal, alpha.
const NF: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World to camera rotation.
    pub rotation: Mat3,
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
}

/// On-disk camera form shared by the dataset manifest, the CLI and the
/// service: `R` is row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraJson {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, rotation: Mat3, translation: Vec3, width: usize, height: usize) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::Config(format!("camera focal lengths must be positive, got {} {}", self.fx, self.fy)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("camera image size must be nonzero".into()));
        }
        let dev = (self.rotation.transpose() * self.rotation - Mat3::identity()).abs().max();
        if !(dev <= 1e-6) {
            return Err(Error::Config(format!("camera rotation is not orthonormal (deviation {dev:e})")));
        }
        if !self.translation.iter().all(|v| v.is_finite()) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::Config("camera has non-finite parameters".into()));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, `up` pointing up in the image.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fx: f64, fy: f64, width: usize, height: usize) -> Result<Self> {
        let f = (target - eye).normalize();
        let x = f.cross(&up);
        if x.norm() < 1e-9 {
            return Err(Error::Config("look_at: view direction parallel to up".into()));
        }
        let x = x.normalize();
        let y = f.cross(&x);
        let r = Mat3::from_rows(&[x.transpose(), y.transpose(), f.transpose()]);
        Self::new(fx, fy, width as f64 / 2.0, height as f64 / 2.0, r, -(r * eye), width, height)
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Pinhole projection of a camera-space point.
    pub fn project_camera_point(&self, pc: &Vec3) -> [f64; 2] {
        [self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy]
    }

    pub fn with_size(&self, width: usize, height: usize) -> Result<Self> {
        let mut c = self.clone();
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        c.fx *= sx;
        c.cx *= sx;
        c.fy *= sy;
        c.cy *= sy;
        c.width = width;
        c.height = height;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> CameraJson {
        let r = self.rotation;
        CameraJson {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            r: [
                r[(0, 0)], r[(0, 1)], r[(0, 2)],
                r[(1, 0)], r[(1, 1)], r[(1, 2)],
                r[(2, 0)], r[(2, 1)], r[(2, 2)],
            ],
            t: [self.translation.x, self.translation.y, self.translation.z],
            width: Some(self.width),
            height: Some(self.height),
        }
    }

    /// `default_size` fills in a missing width/height.
    pub fn from_json(j: &CameraJson, default_size: Option<(usize, usize)>) -> Result<Self> {
        let (w, h) = match (j.width, j.height, default_size) {
            (Some(w), Some(h), _) => (w, h),
            (_, _, Some(s)) => s,
            _ => return Err(Error::Config("camera is missing width/height".into())),
        };
        Self::new(
            j.fx,
            j.fy,
            j.cx,
            j.cy,
            Mat3::from_row_slice(&j.r),
            Vec3::new(j.t[0], j.t[1], j.t[2]),
            w,
            h,
        )
    }
}

/// Screen-space footprint of one surfel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub mean2d: [f64; 2],
    /// Covariance `[[a, b], [b, c]]` stored as `[a, b, c]`, without dilation.
    pub cov: [f64; 3],
    pub depth: f64,
}

fn projection_jacobian(cam: &Camera, pc: &Vec3) -> Matrix2x3<f64> {
    let iz = 1.0 / pc.z;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * pc.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * pc.y * iz * iz,
    )
}

/// `None` when the surfel is behind the near plane.
pub fn project_surfel(s: &Surfel, cam: &Camera) -> Option<Projection> {
    let pc = cam.to_camera(&s.position);
    if !(pc.z >= NEAR) {
        return None;
    }
    let r = quat_to_matrix(&s.rotation);
    let axes = cam.rotation * Matrix3x2::from_columns(&[r.column(0) * s.scale[0], r.column(1) * s.scale[1]]);
    let m = projection_jacobian(cam, &pc) * axes;
    let cov = m * m.transpose();
    Some(Projection {
        mean2d: cam.project_camera_point(&pc),
        cov: [cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]],
        depth: pc.z,
    })
}

/// Per-surfel data cached by the forward pass for the backward pass.
#[derive(Clone, Debug)]
struct Splat {
    surfel: usize,
    face: i64,
    depth: f64,
    mean: [f64; 2],
    /// Inverse of the dilated covariance, `[a, b, c]`.
    conic: [f64; 3],
    /// rgb, depth, camera-space normal (facing the camera).
    feat: [f64; 7],
    pc: Vec3,
    jac: Matrix2x3<f64>,
    /// Camera-space surfel axes scaled by the surfel scales.
    axes: Matrix3x2<f64>,
    /// `m = jac * axes`.
    m: Matrix2<f64>,
    rot: Mat3,
    normal_sign: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct RenderStats {
    pub visible: usize,
    pub culled: usize,
    pub singular: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// `H x W x 3`, row-major, channel-interleaved.
    pub color: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Alpha-normalized expected surfel depth; 0 where alpha is 0.
    pub depth: Vec<f64>,
    /// Alpha-blended camera-space normals (not renormalized).
    pub normal: Vec<f64>,
    /// Face id per pixel, or -1.
    pub id: Vec<i64>,
    pub stats: RenderStats,
}

impl RenderOutput {
    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel_color(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.color[i], self.color[i + 1], self.color[i + 2]]
    }
}

/// Forward-pass record consumed by [`rasterize_backward`].
#[derive(Clone, Debug)]
pub struct RenderRecord {
    width: usize,
    height: usize,
    n_surfels: usize,
    background: [f64; 3],
    splats: Vec<Splat>,
    tiles: Vec<Vec<u32>>,
}

impl RenderRecord {
    pub fn n_surfels(&self) -> usize {
        self.n_surfels
    }
}

fn tiles_x(w: usize) -> usize {
    w.div_ceil(TILE)
}

fn build_splats(surfels: &[Surfel], cam: &Camera, stats: &mut RenderStats) -> Vec<Splat> {
    let mut splats = Vec::with_capacity(surfels.len());
    for (i, s) in surfels.iter().enumerate() {
        let pc = cam.to_camera(&s.position);
        if !(pc.z >= NEAR) {
            stats.culled += 1;
            continue;
        }
        let rot = quat_to_matrix(&s.rotation);
        let axes = cam.rotation * Matrix3x2::from_columns(&[rot.column(0) * s.scale[0], rot.column(1) * s.scale[1]]);
        let jac = projection_jacobian(cam, &pc);
        let m = jac * axes;
        let cov = m * m.transpose() + Matrix2::identity() * DILATION;
        let (a, b, c) = (cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]);
        let det = a * c - b * b;
        let mid = 0.5 * (a + c);
        let disc = (mid * mid - det).max(0.0).sqrt();
        let (lmax, lmin) = (mid + disc, mid - disc);
        if !(det > 0.0) || !(lmin > 0.0) || !(lmax / lmin <= MAX_CONDITION) || !lmax.is_finite() {
            stats.singular += 1;
            continue;
        }
        let n_world = rot.column(2).into_owned();
        let n_cam = cam.rotation * n_world;
        let normal_sign = if n_cam.dot(&pc) > 0.0 { -1.0 } else { 1.0 };
        let n_cam = n_cam * normal_sign;
        splats.push(Splat {
            surfel: i,
            face: s.face as i64,
            depth: pc.z,
            mean: cam.project_camera_point(&pc),
            conic: [c / det, -b / det, a / det],
            feat: [s.color[0], s.color[1], s.color[2], pc.z, n_cam.x, n_cam.y, n_cam.z],
            pc,
            jac,
            axes,
            m,
            rot,
            normal_sign,
        });
    }
    splats.sort_by(|p, q| p.depth.total_cmp(&q.depth).then(p.surfel.cmp(&q.surfel)));
    stats.visible = splats.len();
    splats
}

/// Pixel index range `[lo, hi)` whose centers fall within `radius` of
/// `center` along one axis.
fn pixel_span(center: f64, radius: f64, n: usize) -> Option<(usize, usize)> {
    let lo = (center - radius - 0.5).ceil().max(0.0);
    let hi = (center + radius - 0.5).floor().min(n as f64 - 1.0);
    if !(lo <= hi) {
        return None;
    }
    Some((lo as usize, hi as usize + 1))
}

fn splat_radius(conic: &[f64; 3]) -> f64 {
    // Largest eigenvalue of the covariance is 1 / smallest of the conic.
    let (a, b, c) = (conic[0], conic[1], conic[2]);
    let mid = 0.5 * (a + c);
    let disc = (mid * mid - (a * c - b * b)).max(0.0).sqrt();
    let lmin_conic = mid - disc;
    (2.0 * 255f64.ln() / lmin_conic).sqrt() + 1.0
}

fn bin_tiles(splats: &[Splat], w: usize, h: usize) -> Vec<Vec<u32>> {
    let tx = tiles_x(w);
    let ty = h.div_ceil(TILE);
    let mut tiles = vec![Vec::new(); tx * ty];
    for (si, s) in splats.iter().enumerate() {
        let r = splat_radius(&s.conic);
        let (Some((x0, x1)), Some((y0, y1))) = (pixel_span(s.mean[0], r, w), pixel_span(s.mean[1], r, h)) else {
            continue;
        };
        for ty_ in y0 / TILE..=(y1 - 1) / TILE {
            for tx_ in x0 / TILE..=(x1 - 1) / TILE {
                tiles[ty_ * tx + tx_].push(si as u32);
            }
        }
    }
    tiles
}

#[inline]
fn splat_alpha(s: &Splat, px: f64, py: f64) -> (f64, f64, f64) {
    let dx = px - s.mean[0];
    let dy = py - s.mean[1];
    let q = s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
    ((-0.5 * q).exp(), dx, dy)
}

struct PixelResult {
    feat: [f64; NF],
    t: f64,
    id: i64,
}

/// Front-to-back compositing along `list` (splat indices in depth order).
/// `visit(list_pos, alpha, transmittance_before)` is called per contributor.
#[inline]
fn shade_pixel(px: f64, py: f64, list: &[u32], splats: &[Splat], mut visit: impl FnMut(usize, f64, f64)) -> PixelResult {
    let mut feat = [0.0; NF];
    let mut t = 1.0;
    let mut id = -1;
    for (pos, &si) in list.iter().enumerate() {
        let s = &splats[si as usize];
        let (alpha, _, _) = splat_alpha(s, px, py);
        if alpha < ALPHA_MIN {
            continue;
        }
        let w = alpha * t;
        for c in 0..7 {
            feat[c] += s.feat[c] * w;
        }
        feat[7] += w;
        visit(pos, alpha, t);
        t *= 1.0 - alpha;
        if id < 0 && 1.0 - t > 0.5 {
            id = s.face;
        }
        if t < T_MIN {
            break;
        }
    }
    PixelResult { feat, t, id }
}

fn write_pixel(out: &mut RenderOutput, idx: usize, r: &PixelResult, bg: &[f64; 3]) {
    for c in 0..3 {
        out.color[3 * idx + c] = r.feat[c] + bg[c] * r.t;
        out.normal[3 * idx + c] = r.feat[4 + c];
    }
    let a = r.feat[7];
    out.alpha[idx] = a;
    out.depth[idx] = if a > 0.0 { r.feat[3] / a } else { 0.0 };
    out.id[idx] = r.id;
}

fn empty_output(w: usize, h: usize, stats: RenderStats) -> RenderOutput {
    RenderOutput {
        width: w,
        height: h,
        color: vec![0.0; 3 * w * h],
        alpha: vec![0.0; w * h],
        depth: vec![0.0; w * h],
        normal: vec![0.0; 3 * w * h],
        id: vec![-1; w * h],
        stats,
    }
}

fn tile_pixels(tile: usize, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    let tx = tiles_x(w);
    let (x0, y0) = ((tile % tx) * TILE, (tile / tx) * TILE);
    let (x1, y1) = ((x0 + TILE).min(w), (y0 + TILE).min(h));
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

/// Render `surfels` and keep what the backward pass needs.
pub fn rasterize(surfels: &[Surfel], cam: &Camera, background: [f64; 3]) -> (RenderOutput, RenderRecord) {
    let (w, h) = (cam.width, cam.height);
    let mut stats = RenderStats::default();
    let splats = build_splats(surfels, cam, &mut stats);
    let tiles = bin_tiles(&splats, w, h);
    let shaded: Vec<Vec<(usize, PixelResult)>> = tiles
        .par_iter()
        .enumerate()
        .map(|(ti, list)| {
            tile_pixels(ti, w, h)
                .map(|(x, y)| {
                    let r = shade_pixel(x as f64 + 0.5, y as f64 + 0.5, list, &splats, |_, _, _| {});
                    (y * w + x, r)
                })
                .collect()
        })
        .collect();
    let mut out = empty_output(w, h, stats);
    for tile in &shaded {
        for (idx, r) in tile {
            write_pixel(&mut out, *idx, r, &background);
        }
    }
    let record = RenderRecord {
        width: w,
        height: h,
        n_surfels: surfels.len(),
        background,
        splats,
        tiles,
    };
    (out, record)
}

pub fn render(surfels: &[Surfel], cam: &Camera, background: [f64; 3]) -> RenderOutput {
    rasterize(surfels, cam, background).0
}

/// Reference renderer: every pixel walks the full depth-sorted list.
pub fn rasterize_reference(surfels: &[Surfel], cam: &Camera, background: [f64; 3]) -> RenderOutput {
    let (w, h) = (cam.width, cam.height);
    let mut stats = RenderStats::default();
    let splats = build_splats(surfels, cam, &mut stats);
    let all: Vec<u32> = (0..splats.len() as u32).collect();
    let mut out = empty_output(w, h, stats);
    for y in 0..h {
        for x in 0..w {
            let r = shade_pixel(x as f64 + 0.5, y as f64 + 0.5, &all, &splats, |_, _, _| {});
            write_pixel(&mut out, y * w + x, &r, &background);
        }
    }
    out
}

/// Upstream gradients, laid out like [`RenderOutput`]. Empty vectors mean zero.
#[derive(Clone, Debug, Default)]
pub struct ImageGrads {
    pub color: Vec<f64>,
    pub alpha: Vec<f64>,
    pub depth: Vec<f64>,
    pub normal: Vec<f64>,
}

impl ImageGrads {
    pub fn zeros(w: usize, h: usize) -> Self {
        Self {
            color: vec![0.0; 3 * w * h],
            alpha: vec![0.0; w * h],
            depth: vec![0.0; w * h],
            normal: vec![0.0; 3 * w * h],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurfelGrads {
    pub position: Vec<Vec3>,
    pub scale: Vec<[f64; 2]>,
    /// Gradient w.r.t. the surfel rotation matrix (world axes as columns).
    pub rotation_matrix: Vec<Mat3>,
    /// Gradient w.r.t. the raw quaternion components.
    pub rotation: Vec<[f64; 4]>,
    pub color: Vec<[f64; 3]>,
    /// Screen-space mean gradients (px), useful as a densification-style
    /// diagnostic.
    pub mean2d: Vec<[f64; 2]>,
}

impl SurfelGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            position: vec![Vec3::zeros(); n],
            scale: vec![[0.0; 2]; n],
            rotation_matrix: vec![Mat3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            color: vec![[0.0; 3]; n],
            mean2d: vec![[0.0; 2]; n],
        }
    }
}

/// Screen-space gradient accumulator of one splat.
#[derive(Clone, Copy, Default)]
struct SplatGrad {
    mean: [f64; 2],
    conic: [f64; 3],
    feat: [f64; 7],
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        for i in 0..2 {
            self.mean[i] += o.mean[i];
        }
        for i in 0..3 {
            self.conic[i] += o.conic[i];
        }
        for i in 0..7 {
            self.feat[i] += o.feat[i];
        }
    }
}

fn check_len(name: &str, v: &[f64], n: usize) -> Result<()> {
    if !v.is_empty() && v.len() != n {
        return Err(Error::Usage(format!("gradient image `{name}` has {} entries, expected {n}", v.len())));
    }
    Ok(())
}

#[inline]
fn at(v: &[f64], i: usize) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v[i]
    }
}

/// Exact gradients of the compositing equation w.r.t. every surfel's
/// position, scale, rotation and color.
pub fn rasterize_backward(record: &RenderRecord, out: &RenderOutput, surfels: &[Surfel], cam: &Camera, grads: &ImageGrads) -> Result<SurfelGrads> {
    let (w, h) = (record.width, record.height);
    if surfels.len() != record.n_surfels || cam.width != w || cam.height != h || out.width != w || out.height != h {
        return Err(Error::Usage("render record does not match the scene passed to backward".into()));
    }
    let np = w * h;
    check_len("color", &grads.color, 3 * np)?;
    check_len("alpha", &grads.alpha, np)?;
    check_len("depth", &grads.depth, np)?;
    check_len("normal", &grads.normal, 3 * np)?;
    let splats = &record.splats;
    let bgf = {
        let mut b = [0.0; NF];
        b[..3].copy_from_slice(&record.background);
        b
    };

    let per_tile: Vec<Vec<SplatGrad>> = record
        .tiles
        .par_iter()
        .enumerate()
        .map(|(ti, list)| {
            let mut acc = vec![SplatGrad::default(); list.len()];
            let mut contrib: Vec<(usize, f64, f64)> = Vec::new();
            for (x, y) in tile_pixels(ti, w, h) {
                let idx = y * w + x;
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                // Upstream gradient on the composited feature vector.
                let a = out.alpha[idx];
                let gd = at(&grads.depth, idx);
                let mut g = [0.0; NF];
                for c in 0..3 {
                    g[c] = at(&grads.color, 3 * idx + c);
                    g[4 + c] = at(&grads.normal, 3 * idx + c);
                }
                g[7] = at(&grads.alpha, idx);
                if a > 0.0 {
                    let d_sum = out.depth[idx] * a;
                    g[3] = gd / a;
                    g[7] -= gd * d_sum / (a * a);
                }
                if g.iter().all(|v| *v == 0.0) {
                    continue;
                }
                contrib.clear();
                shade_pixel(px, py, list, splats, |pos, alpha, t| contrib.push((pos, alpha, t)));
                // Background contributes to rgb through the final transmittance.
                let mut behind = bgf;
                for &(pos, alpha, t) in contrib.iter().rev() {
                    let s = &splats[list[pos] as usize];
                    let mut f = [0.0; NF];
                    f[..7].copy_from_slice(&s.feat);
                    f[7] = 1.0;
                    let mut d_alpha = 0.0;
                    for c in 0..NF {
                        d_alpha += g[c] * (f[c] - behind[c]);
                    }
                    d_alpha *= t;
                    let wgt = alpha * t;
                    let sg = &mut acc[pos];
                    for c in 0..7 {
                        sg.feat[c] += g[c] * wgt;
                    }
                    // alpha = exp(-q/2)
                    let dq = -0.5 * alpha * d_alpha;
                    let (_, dx, dy) = splat_alpha(s, px, py);
                    let (ca, cb, cc) = (s.conic[0], s.conic[1], s.conic[2]);
                    // q = a dx^2 + 2 b dx dy + c dy^2 with dx = px - mean_x
                    sg.mean[0] -= dq * (2.0 * ca * dx + 2.0 * cb * dy);
                    sg.mean[1] -= dq * (2.0 * cb * dx + 2.0 * cc * dy);
                    sg.conic[0] += dq * dx * dx;
                    sg.conic[1] += dq * 2.0 * dx * dy;
                    sg.conic[2] += dq * dy * dy;
                    for c in 0..NF {
                        behind[c] = f[c] * alpha + (1.0 - alpha) * behind[c];
                    }
                }
            }
            acc
        })
        .collect();

    let mut screen = vec![SplatGrad::default(); splats.len()];
    for (list, acc) in record.tiles.iter().zip(&per_tile) {
        for (&si, g) in list.iter().zip(acc) {
            screen[si as usize].add(g);
        }
    }

    let mut res = SurfelGrads::zeros(surfels.len());
    let rt = cam.rotation.transpose();
    for (s, g) in splats.iter().zip(&screen) {
        let i = s.surfel;
        res.color[i] = [g.feat[0], g.feat[1], g.feat[2]];
        res.mean2d[i] = g.mean;

        // Conic -> covariance: dL/dCov = -Q G Q with G the symmetric conic gradient.
        let q = Matrix2::new(s.conic[0], s.conic[1], s.conic[1], s.conic[2]);
        let gq = Matrix2::new(g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2]);
        let gcov = -(q * gq * q);
        // Cov = M M^T + dilation
        let gm = (gcov + gcov.transpose()) * s.m;
        let g_axes = s.jac.transpose() * gm;
        let g_jac = gm * s.axes.transpose();

        let pc = s.pc;
        let iz = 1.0 / pc.z;
        let mut gpc = Vec3::zeros();
        // mean2d
        gpc.x += g.mean[0] * cam.fx * iz;
        gpc.y += g.mean[1] * cam.fy * iz;
        gpc.z -= (g.mean[0] * cam.fx * pc.x + g.mean[1] * cam.fy * pc.y) * iz * iz;
        // depth feature
        gpc.z += g.feat[3];
        // projection Jacobian entries
        gpc.z += -g_jac[(0, 0)] * cam.fx * iz * iz - g_jac[(1, 1)] * cam.fy * iz * iz
            + g_jac[(0, 2)] * 2.0 * cam.fx * pc.x * iz * iz * iz
            + g_jac[(1, 2)] * 2.0 * cam.fy * pc.y * iz * iz * iz;
        gpc.x -= g_jac[(0, 2)] * cam.fx * iz * iz;
        gpc.y -= g_jac[(1, 2)] * cam.fy * iz * iz;
        res.position[i] = rt * gpc;

        let sc = surfels[i].scale;
        let mut grot = Mat3::zeros();
        for k in 0..2 {
            let ga = g_axes.column(k).into_owned();
            let r_cam = cam.rotation * s.rot.column(k);
            res.scale[i][k] = r_cam.dot(&ga);
            grot.set_column(k, &(rt * ga * sc[k]));
        }
        let gn = Vec3::new(g.feat[4], g.feat[5], g.feat[6]);
        grot.set_column(2, &(rt * gn * s.normal_sign));
        res.rotation_matrix[i] = grot;
        res.rotation[i] = quat_matrix_backward(&surfels[i].rotation, &grot);
    }
    Ok(res)
}

/// Normals from a depth map: back-project, cross central differences. Zero
/// where alpha < 0.5 at the pixel or any 4-neighbor, and on the border.
/// Normals point toward the camera (negative camera z for a frontal plane).
pub fn depth_to_normal(depth: &[f64], alpha: &[f64], cam: &Camera) -> Vec<f64> {
    let (w, h) = (cam.width, cam.height);
    let mut out = vec![0.0; 3 * w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            if let Some((n, _, _, _)) = depth_normal_at(depth, alpha, cam, x, y) {
                let i = 3 * (y * w + x);
                out[i..i + 3].copy_from_slice(n.as_slice());
            }
        }
    }
    out
}

fn ray(cam: &Camera, x: usize, y: usize) -> Vec3 {
    Vec3::new((x as f64 + 0.5 - cam.cx) / cam.fx, (y as f64 + 0.5 - cam.cy) / cam.fy, 1.0)
}

/// Returns (normal, raw cross product, horizontal diff, vertical diff).
fn depth_normal_at(depth: &[f64], alpha: &[f64], cam: &Camera, x: usize, y: usize) -> Option<(Vec3, Vec3, Vec3, Vec3)> {
    let w = cam.width;
    let idx = |x: usize, y: usize| y * w + x;
    for (xx, yy) in [(x, y), (x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)] {
        if alpha[idx(xx, yy)] < 0.5 {
            return None;
        }
    }
    let p = |xx: usize, yy: usize| ray(cam, xx, yy) * depth[idx(xx, yy)];
    let dx = p(x + 1, y) - p(x - 1, y);
    let dy = p(x, y + 1) - p(x, y - 1);
    let c = dy.cross(&dx);
    let n = c.norm();
    if !(n > 0.0) {
        return None;
    }
    Some((c / n, c, dx, dy))
}

/// Gradient of `sum(grad . depth_to_normal(depth))` w.r.t. depth.
pub fn depth_to_normal_backward(depth: &[f64], alpha: &[f64], cam: &Camera, grad: &[f64]) -> Vec<f64> {
    let (w, h) = (cam.width, cam.height);
    let mut gd = vec![0.0; w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let i = 3 * (y * w + x);
            let g = Vec3::new(grad[i], grad[i + 1], grad[i + 2]);
            if g == Vec3::zeros() {
                continue;
            }
            let Some((n, c, dx, dy)) = depth_normal_at(depth, alpha, cam, x, y) else {
                continue;
            };
            let gc = (g - n * n.dot(&g)) / c.norm();
            let g_dy = dx.cross(&gc);
            let g_dx = gc.cross(&dy);
            gd[y * w + x + 1] += ray(cam, x + 1, y).dot(&g_dx);
            gd[y * w + x - 1] -= ray(cam, x - 1, y).dot(&g_dx);
            gd[(y + 1) * w + x] += ray(cam, x, y + 1).dot(&g_dy);
            gd[(y - 1) * w + x] -= ray(cam, x, y - 1).dot(&g_dy);
        }
    }
    gd
}

/// Quantize `[0, 1]` floats to bytes.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn color_to_rgb8(out: &RenderOutput) -> Vec<u8> {
    out.color.iter().map(|v| to_u8(*v)).collect()
}

pub fn alpha_to_gray8(out: &RenderOutput) -> Vec<u8> {
    out.alpha.iter().map(|v| to_u8(*v)).collect()
}

/// Encode interleaved 8-bit data as PNG bytes (1 or 3 channels).
pub fn encode_png(data: &[u8], width: usize, height: usize, channels: usize) -> Result<Vec<u8>> {
    use image::ImageEncoder;
    let ct = match channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        _ => return Err(Error::Shape(format!("unsupported channel count {channels}"))),
    };
    let mut buf = Vec::new();
    image::codecs::png::PngEncoder::new(&mut buf)
        .write_image(data, width as u32, height as u32, ct)
        .map_err(|e| Error::Image {
            path: "<memory>".into(),
            message: e.to_string(),
        })?;
    Ok(buf)
}

pub fn write_png(path: &Path, data: &[u8], width: usize, height: usize, channels: usize) -> Result<()> {
    let bytes = encode_png(data, width, height, channels).map_err(|e| match e {
        Error::Image { message, .. } => Error::Image {
            path: path.to_path_buf(),
            message,
        },
        e => e,
    })?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct PlaneSidecar {
    pub width: usize,
    pub height: usize,
    pub channels: Vec<String>,
    pub dtype: String,
    pub layout: String,
}

/// Raw little-endian f32 planes plus a `<path>.json` sidecar.
pub fn write_float_planes(path: &Path, data: &[f64], width: usize, height: usize, channels: &[&str]) -> Result<()> {
    if data.len() != width * height * channels.len() {
        return Err(Error::Shape(format!(
            "float plane has {} values, expected {}",
            data.len(),
            width * height * channels.len()
        )));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for v in data {
        f.write_all(&(*v as f32).to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))?;
    let side = PlaneSidecar {
        width,
        height,
        channels: channels.iter().map(|s| s.to_string()).collect(),
        dtype: "float32-le".into(),
        layout: "row-major, channels interleaved".into(),
    };
    let mut sp = path.as_os_str().to_owned();
    sp.push(".json");
    std::fs::write(&sp, serde_json::to_vec_pretty(&side)?).map_err(|e| Error::io(&sp, e))
}

/// Write color/alpha PNGs and depth/normal float planes under `prefix`.
pub fn save_render(out: &RenderOutput, prefix: &Path) -> Result<()> {
    let with = |suffix: &str| {
        let mut p = prefix.as_os_str().to_owned();
        p.push(suffix);
        std::path::PathBuf::from(p)
    };
    write_png(&with("_color.png"), &color_to_rgb8(out), out.width, out.height, 3)?;
    write_png(&with("_alpha.png"), &alpha_to_gray8(out), out.width, out.height, 1)?;
    write_float_planes(&with("_depth.f32"), &out.depth, out.width, out.height, &["depth"])?;
    write_float_planes(&with("_normal.f32"), &out.normal, out.width, out.height, &["nx", "ny", "nz"])
}

/// Every `(pixel, surfel, front_facing)` triple that is composited, in
/// depth order and up to early termination. The rendered image is smooth in
/// the surfel parameters as long as this set does not change, which is what
/// finite-difference checks need to know.
pub fn contributors(surfels: &[Surfel], cam: &Camera) -> Vec<(usize, usize, bool)> {
    let mut stats = RenderStats::default();
    let splats = build_splats(surfels, cam, &mut stats);
    let all: Vec<u32> = (0..splats.len() as u32).collect();
    let mut out = Vec::new();
    for y in 0..cam.height {
        for x in 0..cam.width {
            shade_pixel(x as f64 + 0.5, y as f64 + 0.5, &all, &splats, |pos, _, _| {
                out.push((y * cam.width + x, splats[pos].surfel, splats[pos].normal_sign > 0.0))
            });
        }
    }
    out
}

/// Screen-space selection in pixel units. A pixel is selected when its
/// center `(x + 0.5, y + 0.5)` lies inside.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// `[x0, y0, x1, y1]`, corners in any order, edges inclusive.
    Box([f64; 4]),
    /// Closed pen path, even-odd fill.
    Polygon(Vec<[f64; 2]>),
}

impl Selection {
    pub fn contains(&self, px: f64, py: f64) -> bool {
        match self {
            Selection::Box([x0, y0, x1, y1]) => {
                px >= x0.min(*x1) && px <= x0.max(*x1) && py >= y0.min(*y1) && py <= y0.max(*y1)
            }
            Selection::Polygon(pts) => {
                if pts.len() < 3 {
                    return false;
                }
                let mut inside = false;
                let mut j = pts.len() - 1;
                for i in 0..pts.len() {
                    let ([xi, yi], [xj, yj]) = (pts[i], pts[j]);
                    if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                    j = i;
                }
                inside
            }
        }
    }
}

/// Sorted distinct face ids of the ID pass inside `sel`.
pub fn pick_faces(out: &RenderOutput, sel: &Selection) -> Vec<usize> {
    let mut faces = std::collections::BTreeSet::new();
    for y in 0..out.height {
        for x in 0..out.width {
            let id = out.id[y * out.width + x];
            if id >= 0 && sel.contains(x as f64 + 0.5, y as f64 + 0.5) {
                faces.insert(id as usize);
            }
        }
    }
    faces.into_iter().collect()
}
