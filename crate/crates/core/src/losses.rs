//! Training objectives. Every loss returns its value together with the
//! gradient w.r.t. its differentiable inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::render::{depth_to_normal, depth_to_normal_backward, Camera, ImageGrads, RenderOutput};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Pixels with alpha below this take no part in the normal loss.
pub const NORMAL_ALPHA_MIN: f64 = 0.5;

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("image sizes differ: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Shape("empty image".into()));
    }
    Ok(())
}

/// Mean absolute difference; subgradient 0 at ties.
pub fn l1_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    same_len(pred, target)?;
    let n = pred.len() as f64;
    let mut sum = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            sum += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((sum / n, grad))
}

/// Mean absolute difference between rendered alpha and a {0,1} mask.
pub fn mask_loss(alpha: &[f64], mask: &[f64]) -> Result<(f64, Vec<f64>)> {
    l1_loss(alpha, mask)
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian blur of one plane with zero padding. The kernel is
/// symmetric, so this operator is its own adjoint.
fn blur(x: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = SSIM_WINDOW as isize / 2;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for xx in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sx = xx as isize + i as isize - r;
                if sx >= 0 && (sx as usize) < w {
                    s += kv * x[y * w + sx as usize];
                }
            }
            tmp[y * w + xx] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for xx in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let sy = y as isize + i as isize - r;
                if sy >= 0 && (sy as usize) < h {
                    s += kv * tmp[sy as usize * w + xx];
                }
            }
            out[y * w + xx] = s;
        }
    }
    out
}

fn plane(img: &[f64], c: usize, channels: usize) -> Vec<f64> {
    img.iter().skip(c).step_by(channels).copied().collect()
}

/// SSIM at one pixel from the local moments, with its derivatives w.r.t.
/// the prediction's mean, second moment and cross moment.
fn ssim_terms(ux: f64, uy: f64, mxx: f64, myy: f64, mxy: f64) -> (f64, f64, f64, f64) {
    let a1 = 2.0 * ux * uy + SSIM_C1;
    let a2 = 2.0 * (mxy - ux * uy) + SSIM_C2;
    let b1 = ux * ux + uy * uy + SSIM_C1;
    let b2 = (mxx - ux * ux) + (myy - uy * uy) + SSIM_C2;
    let s = a1 * a2 / (b1 * b2);
    let d_a1 = a2 / (b1 * b2);
    let d_a2 = a1 / (b1 * b2);
    let d_b1 = -s / b1;
    let d_b2 = -s / b2;
    let d_mu = d_a1 * 2.0 * uy - d_a2 * 2.0 * uy + d_b1 * 2.0 * ux - d_b2 * 2.0 * ux;
    (s, d_mu, d_b2, 2.0 * d_a2)
}

/// Per-pixel SSIM of two single-channel planes.
pub fn ssim_map(x: &[f64], y: &[f64], width: usize, height: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let mx = blur(x, width, height, &k);
    let my = blur(y, width, height, &k);
    let mxx = blur(&sq(x, x), width, height, &k);
    let myy = blur(&sq(y, y), width, height, &k);
    let mxy = blur(&sq(x, y), width, height, &k);
    (0..width * height).map(|i| ssim_terms(mx[i], my[i], mxx[i], myy[i], mxy[i]).0).collect()
}

/// `1 - mean SSIM` over all pixels and channels of interleaved images.
pub fn ssim_loss(pred: &[f64], target: &[f64], width: usize, height: usize, channels: usize) -> Result<(f64, Vec<f64>)> {
    same_len(pred, target)?;
    if pred.len() != width * height * channels {
        return Err(Error::Shape(format!(
            "image has {} values, expected {width}x{height}x{channels}",
            pred.len()
        )));
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {width}x{height}"
        )));
    }
    let k = gaussian_kernel();
    let n = pred.len() as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for c in 0..channels {
        let x = plane(pred, c, channels);
        let y = plane(target, c, channels);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let mx = blur(&x, width, height, &k);
        let my = blur(&y, width, height, &k);
        let mxx = blur(&xx, width, height, &k);
        let myy = blur(&yy, width, height, &k);
        let mxy = blur(&xy, width, height, &k);
        let np = width * height;
        let mut g_mu = vec![0.0; np];
        let mut g_m2 = vec![0.0; np];
        let mut g_mxy = vec![0.0; np];
        for i in 0..np {
            let (v, d_mu, d_m2, d_mxy) = ssim_terms(mx[i], my[i], mxx[i], myy[i], mxy[i]);
            total += v;
            g_mu[i] = d_mu;
            g_m2[i] = d_m2;
            g_mxy[i] = d_mxy;
        }
        let b_mu = blur(&g_mu, width, height, &k);
        let b_m2 = blur(&g_m2, width, height, &k);
        let b_mxy = blur(&g_mxy, width, height, &k);
        for i in 0..np {
            grad[i * channels + c] = -(b_mu[i] + 2.0 * x[i] * b_m2[i] + y[i] * b_mxy[i]) / n;
        }
    }
    Ok((1.0 - total / n, grad))
}

/// Plain SSIM index (mean over pixels and channels).
pub fn ssim(pred: &[f64], target: &[f64], width: usize, height: usize, channels: usize) -> Result<f64> {
    Ok(1.0 - ssim_loss(pred, target, width, height, channels)?.0)
}

/// 1-ring neighbor lists in compressed form.
#[derive(Clone, Debug)]
pub struct Adjacency {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
}

impl Adjacency {
    /// Built from unique undirected edges.
    pub fn from_edges(n_vertices: usize, edges: &[[usize; 2]]) -> Result<Self> {
        let mut lists = vec![Vec::new(); n_vertices];
        for e in edges {
            if e[0] >= n_vertices || e[1] >= n_vertices {
                return Err(Error::Index {
                    index: e[0].max(e[1]),
                    len: n_vertices,
                });
            }
            lists[e[0]].push(e[1]);
            lists[e[1]].push(e[0]);
        }
        let mut offsets = vec![0];
        let mut neighbors = Vec::new();
        for (v, mut l) in lists.into_iter().enumerate() {
            if l.is_empty() {
                return Err(Error::Topology(format!("vertex {v} is isolated")));
            }
            l.sort_unstable();
            l.dedup();
            neighbors.extend(l);
            offsets.push(neighbors.len());
        }
        Ok(Self { offsets, neighbors })
    }

    pub fn of(&self, v: usize) -> &[usize] {
        &self.neighbors[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn n_vertices(&self) -> usize {
        self.offsets.len() - 1
    }
}

/// `sum_i |V_i - mean(N(V_i))|^2` with the uniform graph Laplacian.
pub fn laplacian_loss(vertices: &[Vec3], adj: &Adjacency) -> Result<(f64, Vec<Vec3>)> {
    if vertices.len() != adj.n_vertices() {
        return Err(Error::Shape(format!(
            "{} vertices for an adjacency over {}",
            vertices.len(),
            adj.n_vertices()
        )));
    }
    let lap: Vec<Vec3> = (0..vertices.len())
        .map(|i| {
            let nb = adj.of(i);
            vertices[i] - nb.iter().map(|&j| vertices[j]).sum::<Vec3>() / nb.len() as f64
        })
        .collect();
    let loss = lap.iter().map(|l| l.norm_squared()).sum();
    let mut grad: Vec<Vec3> = lap.iter().map(|l| l * 2.0).collect();
    for (i, l) in lap.iter().enumerate() {
        let nb = adj.of(i);
        let g = l * (2.0 / nb.len() as f64);
        for &j in nb {
            grad[j] -= g;
        }
    }
    Ok((loss, grad))
}

/// Mean over edges of the squared relative length change; gradient w.r.t.
/// the morphed vertices.
pub fn edge_loss(morphed: &[Vec3], base: &[Vec3], edges: &[[usize; 2]]) -> Result<(f64, Vec<Vec3>)> {
    if morphed.len() != base.len() {
        return Err(Error::Shape(format!("{} morphed vs {} base vertices", morphed.len(), base.len())));
    }
    let mut grad = vec![Vec3::zeros(); morphed.len()];
    if edges.is_empty() {
        return Ok((0.0, grad));
    }
    let n = edges.len() as f64;
    let mut loss = 0.0;
    for (ei, e) in edges.iter().enumerate() {
        let lb = (base[e[1]] - base[e[0]]).norm();
        if !(lb > 0.0) {
            return Err(Error::Precondition(format!("base edge {ei} ({}, {}) has zero length", e[0], e[1])));
        }
        let d = morphed[e[1]] - morphed[e[0]];
        let lm = d.norm();
        let r = (lm - lb) / lb;
        loss += r * r;
        if lm > 0.0 {
            let g = d * (2.0 * r / (lb * lm * n));
            grad[e[1]] += g;
            grad[e[0]] -= g;
        }
    }
    Ok((loss / n, grad))
}

/// Gradients of the normal loss w.r.t. the rendered normal and depth
/// channels.
pub struct NormalLossGrads {
    pub normal: Vec<f64>,
    pub depth: Vec<f64>,
}

/// Mean over valid pixels of `1 - normalize(n_blend) . n_depth`.
pub fn normal_loss(render: &RenderOutput, cam: &Camera) -> Result<(f64, NormalLossGrads)> {
    let np = render.n_pixels();
    if cam.width != render.width || cam.height != render.height {
        return Err(Error::Shape("camera and render sizes differ".into()));
    }
    let nd = depth_to_normal(&render.depth, &render.alpha, cam);
    let mut valid = Vec::new();
    for i in 0..np {
        let d = Vec3::new(nd[3 * i], nd[3 * i + 1], nd[3 * i + 2]);
        let b = Vec3::new(render.normal[3 * i], render.normal[3 * i + 1], render.normal[3 * i + 2]);
        if render.alpha[i] >= NORMAL_ALPHA_MIN && d != Vec3::zeros() && b.norm() > 0.0 {
            valid.push((i, b, d));
        }
    }
    let mut g_normal = vec![0.0; 3 * np];
    let mut g_nd = vec![0.0; 3 * np];
    if valid.is_empty() {
        return Ok((
            0.0,
            NormalLossGrads {
                normal: g_normal,
                depth: vec![0.0; np],
            },
        ));
    }
    let n = valid.len() as f64;
    let mut loss = 0.0;
    for (i, b, d) in &valid {
        let bn = b.norm();
        let bh = b / bn;
        loss += 1.0 - bh.dot(d);
        let gb = -(d - bh * bh.dot(d)) / (bn * n);
        let gd = -bh / n;
        for c in 0..3 {
            g_normal[3 * i + c] = gb[c];
            g_nd[3 * i + c] = gd[c];
        }
    }
    let g_depth = depth_to_normal_backward(&render.depth, &render.alpha, cam, &g_nd);
    Ok((loss / n, NormalLossGrads { normal: g_normal, depth: g_depth }))
}

const PERCEP_SCALES: usize = 3;

fn downsample(x: &[f64], w: usize, h: usize, ch: usize) -> (Vec<f64>, usize, usize) {
    let (w2, h2) = (w / 2, h / 2);
    let mut out = vec![0.0; w2 * h2 * ch];
    for y in 0..h2 {
        for xx in 0..w2 {
            for c in 0..ch {
                let s = x[((2 * y) * w + 2 * xx) * ch + c]
                    + x[((2 * y) * w + 2 * xx + 1) * ch + c]
                    + x[((2 * y + 1) * w + 2 * xx) * ch + c]
                    + x[((2 * y + 1) * w + 2 * xx + 1) * ch + c];
                out[(y * w2 + xx) * ch + c] = 0.25 * s;
            }
        }
    }
    (out, w2, h2)
}

fn upsample_adjoint(g: &[f64], w: usize, h: usize, ch: usize) -> Vec<f64> {
    let (w2, h2) = (w / 2, h / 2);
    let mut out = vec![0.0; w * h * ch];
    for y in 0..h2 {
        for xx in 0..w2 {
            for c in 0..ch {
                let v = 0.25 * g[(y * w2 + xx) * ch + c];
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    out[((2 * y + dy) * w + 2 * xx + dx) * ch + c] += v;
                }
            }
        }
    }
    out
}

/// Stand-in perceptual term: L1 between image gradients of prediction and
/// target, averaged over three dyadic scales.
pub fn gradient_proxy_loss(pred: &[f64], target: &[f64], width: usize, height: usize, channels: usize) -> Result<(f64, Vec<f64>)> {
    same_len(pred, target)?;
    let mut preds = vec![(pred.to_vec(), width, height)];
    let mut targets = vec![target.to_vec()];
    for _ in 1..PERCEP_SCALES {
        let (p, w, h) = preds.last().unwrap().clone();
        if w < 4 || h < 4 {
            break;
        }
        let (p2, w2, h2) = downsample(&p, w, h, channels);
        let (t2, _, _) = downsample(targets.last().unwrap(), w, h, channels);
        preds.push((p2, w2, h2));
        targets.push(t2);
    }
    let ns = preds.len() as f64;
    let mut loss = 0.0;
    let mut grads: Vec<Vec<f64>> = Vec::new();
    for ((p, w, h), t) in preds.iter().zip(&targets) {
        let (w, h) = (*w, *h);
        let mut g = vec![0.0; p.len()];
        let count = ((w - 1) * h + w * (h - 1)) * channels;
        let count = count.max(1) as f64;
        for y in 0..h {
            for x in 0..w {
                for c in 0..channels {
                    let i = (y * w + x) * channels + c;
                    for j in [if x + 1 < w { Some(i + channels) } else { None }, if y + 1 < h { Some(i + w * channels) } else { None }]
                        .into_iter()
                        .flatten()
                    {
                        let d = (p[j] - p[i]) - (t[j] - t[i]);
                        loss += d.abs() / (count * ns);
                        let s = if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        } / (count * ns);
                        g[j] += s;
                        g[i] -= s;
                    }
                }
            }
        }
        grads.push(g);
    }
    // Pull coarse-scale gradients back to full resolution.
    for s in (1..grads.len()).rev() {
        let (_, w, h) = &preds[s - 1];
        let up = upsample_adjoint(&grads[s], *w, *h, channels);
        for (a, b) in grads[s - 1].iter_mut().zip(up) {
            *a += b;
        }
    }
    Ok((loss, grads.swap_remove(0)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_lap: f64,
    pub lambda_edge: f64,
    pub lambda_normal: f64,
    pub lambda_l1: f64,
    pub lambda_ssim: f64,
    pub lambda_mask: f64,
    pub lambda_percep: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::stage1()
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            lambda_lap: 0.0,
            lambda_edge: 0.0,
            lambda_normal: 0.0,
            lambda_l1: 0.0,
            lambda_ssim: 0.0,
            lambda_mask: 0.0,
            lambda_percep: 0.0,
        }
    }

    pub fn stage1() -> Self {
        Self {
            lambda_lap: 1000.0,
            lambda_edge: 100.0,
            lambda_normal: 0.05,
            lambda_l1: 0.8,
            lambda_ssim: 0.2,
            lambda_mask: 1.0,
            lambda_percep: 0.0,
        }
    }

    /// The perceptual weight stays 0 by default; set it explicitly to enable
    /// the gradient proxy.
    pub fn stage2() -> Self {
        Self {
            lambda_lap: 100.0,
            lambda_edge: 10.0,
            lambda_normal: 0.0,
            ..Self::stage1()
        }
    }

    fn as_array(&self) -> [f64; 7] {
        [
            self.lambda_lap,
            self.lambda_edge,
            self.lambda_normal,
            self.lambda_l1,
            self.lambda_ssim,
            self.lambda_mask,
            self.lambda_percep,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")))
        }
    }
}

/// Unweighted loss components plus the weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lap: f64,
    pub edge: f64,
    pub normal: f64,
    pub l1: f64,
    pub ssim: f64,
    pub mask: f64,
    pub percep: f64,
    pub total: f64,
}

/// Ground truth for one frame.
pub struct FrameTarget<'a> {
    /// `H x W x 3`.
    pub rgb: &'a [f64],
    /// `H x W`, values in {0, 1}.
    pub mask: &'a [f64],
}

/// Mesh terms. The Laplacian is evaluated on `laplacian_input`, which the
/// caller chooses (morphed positions or the displacement from the base).
pub struct GeometryInput<'a> {
    pub morphed: &'a [Vec3],
    pub base: &'a [Vec3],
    pub laplacian_input: &'a [Vec3],
    pub adjacency: &'a Adjacency,
    pub edges: &'a [[usize; 2]],
}

pub struct TotalGrads {
    pub image: ImageGrads,
    /// Gradient w.r.t. `laplacian_input` plus the edge term's gradient w.r.t.
    /// the morphed vertices (both index the same vertices).
    pub vertices: Vec<Vec3>,
}

/// `L_geo + L_pic` with per-term weights. Terms whose weight is 0 are
/// skipped entirely and report 0.
pub fn total_loss(
    render: &RenderOutput,
    cam: &Camera,
    target: &FrameTarget,
    geo: Option<&GeometryInput>,
    w: &LossWeights,
) -> Result<(LossBreakdown, TotalGrads)> {
    w.validate()?;
    let (wd, ht) = (render.width, render.height);
    let np = wd * ht;
    let mut b = LossBreakdown::default();
    let mut g = ImageGrads::zeros(wd, ht);
    let n_verts = geo.map_or(0, |g| g.morphed.len());
    let mut gv = vec![Vec3::zeros(); n_verts];

    if w.lambda_l1 > 0.0 {
        let (l, gr) = l1_loss(&render.color, target.rgb)?;
        b.l1 = l;
        g.color.iter_mut().zip(gr).for_each(|(a, v)| *a += w.lambda_l1 * v);
    }
    if w.lambda_ssim > 0.0 {
        let (l, gr) = ssim_loss(&render.color, target.rgb, wd, ht, 3)?;
        b.ssim = l;
        g.color.iter_mut().zip(gr).for_each(|(a, v)| *a += w.lambda_ssim * v);
    }
    if w.lambda_mask > 0.0 {
        if target.mask.len() != np {
            return Err(Error::Shape(format!("mask has {} pixels, expected {np}", target.mask.len())));
        }
        let (l, gr) = mask_loss(&render.alpha, target.mask)?;
        b.mask = l;
        g.alpha.iter_mut().zip(gr).for_each(|(a, v)| *a += w.lambda_mask * v);
    }
    if w.lambda_percep > 0.0 {
        let (l, gr) = gradient_proxy_loss(&render.color, target.rgb, wd, ht, 3)?;
        b.percep = l;
        g.color.iter_mut().zip(gr).for_each(|(a, v)| *a += w.lambda_percep * v);
    }
    if w.lambda_normal > 0.0 {
        let (l, gr) = normal_loss(render, cam)?;
        b.normal = l;
        g.normal.iter_mut().zip(gr.normal).for_each(|(a, v)| *a += w.lambda_normal * v);
        g.depth.iter_mut().zip(gr.depth).for_each(|(a, v)| *a += w.lambda_normal * v);
    }
    if let Some(geo) = geo {
        if w.lambda_lap > 0.0 {
            let (l, gr) = laplacian_loss(geo.laplacian_input, geo.adjacency)?;
            b.lap = l;
            gv.iter_mut().zip(gr).for_each(|(a, v)| *a += v * w.lambda_lap);
        }
        if w.lambda_edge > 0.0 {
            let (l, gr) = edge_loss(geo.morphed, geo.base, geo.edges)?;
            b.edge = l;
            gv.iter_mut().zip(gr).for_each(|(a, v)| *a += v * w.lambda_edge);
        }
    }
    b.total = w.lambda_lap * b.lap
        + w.lambda_edge * b.edge
        + w.lambda_normal * b.normal
        + w.lambda_l1 * b.l1
        + w.lambda_ssim * b.ssim
        + w.lambda_mask * b.mask
        + w.lambda_percep * b.percep;
    if !b.total.is_finite() {
        return Err(Error::Precondition(format!("non-finite loss total {b:?}")));
    }
    Ok((b, TotalGrads { image: g, vertices: gv }))
}
