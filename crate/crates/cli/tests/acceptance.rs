//! Acceptance suite: one PASS/FAIL line per primary criterion.
//!
//! Runs as a plain binary (`harness = false`). Pass criterion numbers as
//! arguments to run a subset, e.g. `cargo test --test acceptance -- 1 3`.
//! The three desk-scale fits (criteria 4-7 and 11) take most of the time.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

use gma_core::body::{BodyConfig, MeshState};
use gma_core::decoders::{
    color_head, color_head_backward, coarse_head, coarse_head_backward, fine_head, fine_head_backward, mlp_backward,
    mlp_forward, scale_head, scale_head_backward, Activation, MlpWeights,
};
use gma_core::edit::{apply_edit, invert_color, stamp_texture, transfer_features, EditCommand, FaceRegion, InvertConfig, RgbImage, TransferMode};
use gma_core::geom::{axis_angle_to_matrix, matrix_to_quat, Vec3};
use gma_core::gma::{embed_coarse, embed_fine, init_feature_layer, morph_mesh, ModelConfig, OffsetMode, Surfel, UvdCoord};
use gma_core::losses::{edge_loss, l1_loss, laplacian_loss, mask_loss, ssim_loss, Adjacency};
use gma_core::pipeline::{avatar_scene, decode, face_mean_colors, Avatar, AvatarContext, DecodeSet, SurfelLayers};
use gma_core::render::{contributors, pick_faces, rasterize, rasterize_backward, render, Camera, ImageGrads, RenderOutput, Selection};
use gma_core::synth::{generate_subject, small_body_config, synthesize, Dataset, OrbitSpec, RenderSpec, Split, TextureSpec};
use gma_core::train::{evaluate, fit, init_avatar, mesh_laplacians, FitConfig, FitHooks, Metrics};
use gma_core::persist;
use gma_core::error::CheckpointError;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

struct Report {
    lines: Vec<(u32, &'static str, bool, String)>,
}

impl Report {
    fn run(&mut self, id: u32, name: &'static str, f: impl FnOnce() -> Check) {
        let t = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        let (pass, detail) = match res {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        println!("{} [{id}] {name}: {detail} ({secs:.1} s)", if pass { "PASS" } else { "FAIL" });
        self.lines.push((id, name, pass, detail));
    }
}

// ---------------------------------------------------------------------------
// 1. Gradient integrity

const REL_TOL: f64 = 1e-3;
/// Absolute floor for components that are zero up to rounding.
const ABS_FLOOR: f64 = 1e-7;

fn close(fd: f64, an: f64) -> bool {
    (fd - an).abs() <= REL_TOL * fd.abs().max(an.abs()) + ABS_FLOOR
}

fn random_surfels(rng: &mut ChaCha8Rng, n: usize) -> Vec<Surfel> {
    (0..n)
        .map(|i| {
            let aa = Vec3::new(rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8), rng.random_range(-3.0..3.0));
            Surfel {
                position: Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
                scale: [rng.random_range(0.08..0.3), rng.random_range(0.08..0.3)],
                rotation: matrix_to_quat(&axis_angle_to_matrix(&aa)),
                color: [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
                face: i,
            }
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn weighted(out: &RenderOutput, g: &ImageGrads) -> f64 {
    dot(&out.color, &g.color) + dot(&out.alpha, &g.alpha) + dot(&out.depth, &g.depth) + dot(&out.normal, &g.normal)
}

#[derive(Default)]
struct GradTally {
    checked: usize,
    skipped: usize,
    worst: f64,
}

impl GradTally {
    fn record(&mut self, label: &str, fd: f64, an: f64) -> Result<(), String> {
        self.checked += 1;
        let rel = (fd - an).abs() / (fd.abs().max(an.abs()) + ABS_FLOOR / REL_TOL);
        self.worst = self.worst.max(rel);
        ensure(close(fd, an), || format!("{label}: finite difference {fd:.9e} vs analytic {an:.9e}"))
    }
}

fn rasterizer_grads(seed: u64, tally: &mut GradTally) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
    let side = if seed % 2 == 0 { 8 } else { 16 };
    let cam = ok(Camera::look_at(
        Vec3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), 2.5),
        Vec3::zeros(),
        Vec3::y(),
        2.0 * side as f64,
        2.0 * side as f64,
        side,
        side,
    ))?;
    let n = 3 + (seed as usize % 8);
    let surfels = random_surfels(&mut rng, n);
    let bg = [0.3, 0.6, 0.9];
    let mut rnd = |k: usize| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let g = ImageGrads {
        color: rnd(3 * side * side),
        alpha: rnd(side * side),
        depth: rnd(side * side),
        normal: rnd(3 * side * side),
    };
    let (out, rec) = rasterize(&surfels, &cam, bg);
    let an = ok(rasterize_backward(&rec, &out, &surfels, &cam, &g))?;
    let sig = contributors(&surfels, &cam);
    let h = 1e-5;
    type Edit = Box<dyn Fn(&mut Surfel, f64)>;
    for i in 0..n {
        let mut probes: Vec<(String, f64, Edit)> = Vec::new();
        for k in 0..3 {
            probes.push((format!("position[{k}]"), an.position[i][k], Box::new(move |s, d| s.position[k] += d)));
            probes.push((format!("color[{k}]"), an.color[i][k], Box::new(move |s, d| s.color[k] += d)));
        }
        for k in 0..2 {
            probes.push((format!("scale[{k}]"), an.scale[i][k], Box::new(move |s, d| s.scale[k] += d)));
        }
        for k in 0..4 {
            probes.push((format!("rotation[{k}]"), an.rotation[i][k], Box::new(move |s, d| s.rotation[k] += d)));
        }
        for (label, a, edit) in probes {
            let (mut sp, mut sm) = (surfels.clone(), surfels.clone());
            edit(&mut sp[i], h);
            edit(&mut sm[i], -h);
            // A perturbation that changes which surfels reach a pixel crosses
            // a discontinuity of the image; finite differences are undefined there.
            if contributors(&sp, &cam) != sig || contributors(&sm, &cam) != sig {
                tally.skipped += 1;
                continue;
            }
            let fd = (weighted(&render(&sp, &cam, bg), &g) - weighted(&render(&sm, &cam, bg), &g)) / (2.0 * h);
            tally.record(&format!("scene {seed} surfel {i} {label}"), fd, a)?;
        }
    }
    Ok(())
}

enum Head {
    Coarse,
    Fine,
    Color,
    Scale,
}

const MAX_OFFSET: f64 = 0.05;
const MAX_D: f64 = 0.02;
const MAX_FACTOR: f64 = 4.0;

fn head_value(head: &Head, raw: &[f64], g: &[f64]) -> f64 {
    match head {
        Head::Coarse => dot(&coarse_head(raw, MAX_OFFSET), g),
        Head::Fine => {
            let c: Vec<f64> = fine_head(raw, MAX_D).iter().flat_map(|c| [c.u, c.v, c.d]).collect();
            dot(&c, g)
        }
        Head::Color => dot(&color_head(raw).concat(), g),
        Head::Scale => dot(&scale_head(raw, MAX_FACTOR).concat(), g),
    }
}

fn head_grad(head: &Head, raw: &[f64], g: &[f64]) -> Vec<f64> {
    match head {
        Head::Coarse => coarse_head_backward(raw, g, MAX_OFFSET),
        Head::Fine => {
            let gg: Vec<[f64; 3]> = g.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
            fine_head_backward(raw, &gg, MAX_D)
        }
        Head::Color => {
            let gg: Vec<[f64; 3]> = g.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
            color_head_backward(raw, &gg)
        }
        Head::Scale => {
            let gg: Vec<[f64; 2]> = g.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
            scale_head_backward(raw, &gg, MAX_FACTOR)
        }
    }
}

fn decoder_grads(seed: u64, tally: &mut GradTally) -> Result<(), String> {
    let model = ModelConfig::default();
    let d_in = model.decoder_input_dim();
    let n_k = model.n_k;
    let nets = [
        ("coarse/normal", Head::Coarse, OffsetMode::Normal.dim(), Activation::Gelu),
        ("coarse/face", Head::Coarse, OffsetMode::Face.dim(), Activation::Gelu),
        ("fine", Head::Fine, 3 * n_k, Activation::Gelu),
        ("color", Head::Color, 3 * n_k, Activation::Relu),
        ("scale", Head::Scale, 2 * n_k, Activation::Relu),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(9000 + seed);
    for (name, head, d_out, act) in nets {
        let w = MlpWeights::init(d_in, d_out, act, 1.0, rng.random());
        let x: Vec<f64> = (0..d_in).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..d_out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |w: &MlpWeights, x: &[f64]| head_value(&head, &mlp_forward(w, x).expect("forward").0, &g);
        let (raw, tape) = ok(mlp_forward(&w, &x))?;
        let (wg, xg) = mlp_backward(&w, &tape, &head_grad(&head, &raw, &g));
        let h = 1e-6;
        // ReLU kinks: if one-sided slopes disagree the probe straddles a kink.
        let probe = |label: String, an: f64, fp: f64, f0: f64, fm: f64, tally: &mut GradTally| -> Result<(), String> {
            let (fwd, bwd) = ((fp - f0) / h, (f0 - fm) / h);
            if (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()) + 1e-5 {
                tally.skipped += 1;
                return Ok(());
            }
            tally.record(&label, (fp - fm) / (2.0 * h), an)
        };
        let f0 = f(&w, &x);
        for i in 0..d_in {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            probe(format!("seed {seed} {name} input[{i}]"), xg[i], f(&w, &xp), f0, f(&w, &xm), tally)?;
        }
        let pick = |rng: &mut ChaCha8Rng, n: usize, k: usize| -> Vec<usize> { (0..k.min(n)).map(|_| rng.random_range(0..n)).collect() };
        for idx in pick(&mut rng, w.w1.len(), 40) {
            let (r, c) = (idx / w.w1.ncols(), idx % w.w1.ncols());
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp.w1[(r, c)] += h;
            wm.w1[(r, c)] -= h;
            probe(format!("seed {seed} {name} w1[{r},{c}]"), wg.w1[(r, c)], f(&wp, &x), f0, f(&wm, &x), tally)?;
        }
        for idx in pick(&mut rng, w.b1.len(), 20) {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp.b1[idx] += h;
            wm.b1[idx] -= h;
            probe(format!("seed {seed} {name} b1[{idx}]"), wg.b1[idx], f(&wp, &x), f0, f(&wm, &x), tally)?;
        }
        for idx in pick(&mut rng, w.w2.len(), 40) {
            let (r, c) = (idx / w.w2.ncols(), idx % w.w2.ncols());
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp.w2[(r, c)] += h;
            wm.w2[(r, c)] -= h;
            probe(format!("seed {seed} {name} w2[{r},{c}]"), wg.w2[(r, c)], f(&wp, &x), f0, f(&wm, &x), tally)?;
        }
        for idx in 0..w.b2.len() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp.b2[idx] += h;
            wm.b2[idx] -= h;
            probe(format!("seed {seed} {name} b2[{idx}]"), wg.b2[idx], f(&wp, &x), f0, f(&wm, &x), tally)?;
        }
    }
    Ok(())
}

fn criterion_1() -> Check {
    let t = Instant::now();
    let mut raster = GradTally::default();
    let mut dec = GradTally::default();
    let scenes = 24;
    for seed in 0..scenes {
        rasterizer_grads(seed, &mut raster)?;
        decoder_grads(seed, &mut dec)?;
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(raster.skipped * 10 < raster.checked, || {
        format!("too many discontinuous rasterizer probes: {} of {}", raster.skipped, raster.checked + raster.skipped)
    })?;
    ensure(dec.skipped * 10 < dec.checked, || format!("too many kinked decoder probes: {}", dec.skipped))?;
    ensure(secs < 60.0, || format!("took {secs:.1} s, limit 60 s"))?;
    Ok(format!(
        "{scenes} scenes; rasterizer {} probes (worst rel {:.1e}, {} skipped at discontinuities); decoders {} probes (worst rel {:.1e}, {} skipped at kinks); {secs:.1} s",
        raster.checked, raster.worst, raster.skipped, dec.checked, dec.worst, dec.skipped
    ))
}

// ---------------------------------------------------------------------------
// 2. Embedding oracles

fn criterion_2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let arr = |v: &Vec3| [v.x, v.y, v.z];
    for trial in 0..1000 {
        let mut p = || [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let (x, n): (Vec<[f64; 3]>, Vec<[f64; 3]>) = (0..3).map(|_| (p(), p())).unzip();
        let o: Vec<f64> = (0..3).map(|_| rng.random_range(-0.05..0.05)).collect();
        let to_v = |a: &[f64; 3]| Vec3::new(a[0], a[1], a[2]);
        let base = MeshState {
            vertices: x.iter().map(to_v).collect(),
            vertex_normals: n.iter().map(to_v).collect(),
        };
        let faces = [[0usize, 1, 2]];
        let morphed = ok(morph_mesh(&base, &o))?;
        let Ok(coarse) = embed_coarse(&morphed, &faces, &[[0.5; 3]]) else {
            continue;
        };
        // X_f + (1/3) sum_k O_k N_k, with X_f the base face center.
        let mut expect = [0.0; 3];
        for k in 0..3 {
            for c in 0..3 {
                expect[c] += (x[k][c] + o[k] * n[k][c]) / 3.0;
            }
        }
        let got = arr(&coarse[0].position);
        for c in 0..3 {
            worst = worst.max((got[c] - expect[c]).abs());
        }

        // Fine: u V1 + v V2 + (1-u-v) V3 + N_f d on the morphed face.
        let u = rng.random_range(0.0..1.0);
        let v = rng.random_range(0.0..(1.0 - u));
        let d = rng.random_range(-0.02..0.02);
        let fine = ok(embed_fine(&morphed, &faces, 0, &[UvdCoord { u, v, d }], &[[1.0, 1.0]], &[[0.5; 3]]))?;
        let m: Vec<[f64; 3]> = (0..3).map(|k| [0, 1, 2].map(|c| x[k][c] + o[k] * n[k][c])).collect();
        let e1 = [0, 1, 2].map(|c| m[1][c] - m[0][c]);
        let e2 = [0, 1, 2].map(|c| m[2][c] - m[0][c]);
        let cr = [e1[1] * e2[2] - e1[2] * e2[1], e1[2] * e2[0] - e1[0] * e2[2], e1[0] * e2[1] - e1[1] * e2[0]];
        let len = (cr[0] * cr[0] + cr[1] * cr[1] + cr[2] * cr[2]).sqrt();
        let got = arr(&fine[0].position);
        for c in 0..3 {
            let e = u * m[0][c] + v * m[1][c] + (1.0 - u - v) * m[2][c] + cr[c] / len * d;
            worst = worst.max((got[c] - e).abs());
        }
        ensure(worst <= 1e-6, || format!("face {trial}: error {worst:.2e}"))?;
    }
    Ok(format!("1000 random faces, max abs error {worst:.2e} (tolerance 1e-6)"))
}

// ---------------------------------------------------------------------------
// 3. Loss fixed points and values

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (w, h) = (16, 14);
    let img: Vec<f64> = (0..3 * w * h).map(|_| rng.random_range(0.0..1.0)).collect();
    let mask: Vec<f64> = (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect();
    let l1 = ok(l1_loss(&img, &img))?.0;
    let ss = ok(ssim_loss(&img, &img, w, h, 3))?.0;
    let mk = ok(mask_loss(&mask, &mask))?.0;
    let verts: Vec<Vec3> = (0..6).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
    let edges = [[0, 1], [1, 2], [2, 0], [3, 4], [4, 5], [2, 5]];
    let ed = ok(edge_loss(&verts, &verts, &edges))?.0;
    ensure(l1 == 0.0 && ss.abs() < 1e-12 && mk == 0.0 && ed == 0.0, || {
        format!("identical inputs: l1 {l1}, ssim {ss}, mask {mk}, edge {ed}")
    })?;

    // Regular tetrahedron inscribed in the unit sphere: each vertex minus
    // the mean of the other three is 4/3 of it, so the loss is 4 * 16/9.
    let s = 1.0 / 3f64.sqrt();
    let tet = vec![Vec3::new(s, s, s), Vec3::new(s, -s, -s), Vec3::new(-s, s, -s), Vec3::new(-s, -s, s)];
    let tet_edges = [[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]];
    let adj = ok(Adjacency::from_edges(4, &tet_edges))?;
    let lap = ok(laplacian_loss(&tet, &adj))?.0;
    ensure((lap - 64.0 / 9.0).abs() <= 1e-6, || format!("tetrahedron Laplacian {lap}, expected 64/9"))?;

    let stretched: Vec<Vec3> = tet.iter().map(|v| v * 1.1).collect();
    let el = ok(edge_loss(&stretched, &tet, &tet_edges))?.0;
    ensure((el - 0.01).abs() <= 1e-9, || format!("1.1x stretch edge loss {el}, expected 0.01"))?;
    Ok(format!("zero on identical inputs; tetrahedron Laplacian {lap:.9} (64/9); stretch edge loss {el:.12}"))
}

// ---------------------------------------------------------------------------
// Desk-scale fits shared by criteria 4-7 and 11

struct FitRun {
    avatar: Avatar,
    metrics: Metrics,
    /// Laplacian loss of the learned displacement, the trained term.
    laplacian: f64,
    /// Laplacian loss of the morphed positions, template curvature included.
    abs_laplacian: f64,
    wall: Duration,
}

struct Fits {
    init: Metrics,
    two: FitRun,
    one: FitRun,
    face: FitRun,
}

const FIT_SEED: u64 = 0;

fn standard_dataset() -> gma_core::Result<(BodyConfig, Dataset)> {
    let body = BodyConfig::default();
    let subject = generate_subject(&body, TextureSpec::default(), FIT_SEED)?;
    let ds = synthesize(&subject, &RenderSpec::default(), FIT_SEED)?;
    Ok((body, ds))
}

fn run_fit(body: &BodyConfig, ds: &Dataset, cfg: &FitConfig, label: &str) -> gma_core::Result<FitRun> {
    let t = Instant::now();
    let (avatar, _) = fit(body, ds, cfg, &mut FitHooks::default())?;
    let wall = t.elapsed();
    let metrics = evaluate(&avatar, ds, Split::Holdout)?;
    let (abs_laplacian, laplacian) = mesh_laplacians(&avatar)?;
    if let Some(dir) = std::env::var_os("GMA_ACCEPTANCE_KEEP") {
        gma_core::persist::save(&avatar, &std::path::Path::new(&dir).join(format!("{label}.gma")))?;
    }
    println!(
        "  fit {label}: {:.1} min, holdout psnr {:.2} dB, ssim {:.4}, iou {:.4}, laplacian {laplacian:.4e} (positions {abs_laplacian:.5})",
        wall.as_secs_f64() / 60.0,
        metrics.mean_psnr,
        metrics.mean_ssim,
        metrics.mean_iou
    );
    Ok(FitRun {
        avatar,
        metrics,
        laplacian,
        abs_laplacian,
        wall,
    })
}

fn run_fits() -> gma_core::Result<Fits> {
    let (body, ds) = standard_dataset()?;
    let base = FitConfig {
        seed: FIT_SEED,
        ..FitConfig::default()
    };
    let init = evaluate(&init_avatar(&body, &ds, &base)?, &ds, Split::Holdout)?;
    println!("  init: holdout psnr {:.2} dB, iou {:.4}", init.mean_psnr, init.mean_iou);
    let two = run_fit(&body, &ds, &base, "two-stage")?;
    let one = run_fit(&body, &ds, &FitConfig { one_stage: true, ..base.clone() }, "one-stage")?;
    let face = run_fit(&body, &ds, &base.clone().with_offset_mode(OffsetMode::Face), "face-offset")?;
    Ok(Fits {
        init,
        two,
        one,
        face,
    })
}

fn criterion_4(f: &Fits) -> Check {
    let gain = f.two.metrics.mean_psnr - f.init.mean_psnr;
    let mins = f.two.wall.as_secs_f64() / 60.0;
    let detail = format!(
        "48 frames 128x128, 2000+2000 steps, 1 thread: holdout psnr {:.2} -> {:.2} dB (+{gain:.2}, need +8), iou {:.4} (need 0.9), {mins:.1} min",
        f.init.mean_psnr, f.two.metrics.mean_psnr, f.two.metrics.mean_iou
    );
    ensure(gain >= 8.0 && f.two.metrics.mean_iou >= 0.9, || detail.clone())?;
    ensure(mins < 30.0, || format!("{detail}; over the 30 min runtime target"))?;
    Ok(detail)
}

fn criterion_5(f: &Fits) -> Check {
    let detail = format!(
        "psnr two-stage {:.2} vs one-stage {:.2} dB; displacement laplacian two-stage {:.4e} vs one-stage {:.4e} (positions {:.5} vs {:.5})",
        f.two.metrics.mean_psnr, f.one.metrics.mean_psnr, f.two.laplacian, f.one.laplacian, f.two.abs_laplacian, f.one.abs_laplacian
    );
    ensure(f.two.metrics.mean_psnr >= f.one.metrics.mean_psnr && f.two.laplacian <= f.one.laplacian, || detail.clone())?;
    Ok(detail)
}

fn criterion_6(f: &Fits) -> Check {
    let detail = format!(
        "displacement laplacian normal offsets {:.4e} vs free face offsets {:.4e} (positions {:.5} vs {:.5})",
        f.two.laplacian, f.face.laplacian, f.two.abs_laplacian, f.face.abs_laplacian
    );
    ensure(f.two.laplacian <= f.face.laplacian, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 7. Editing contracts

fn front_camera(side: usize) -> gma_core::Result<Camera> {
    OrbitSpec::default().camera(0, 1, side, side)
}

fn criterion_7(f: &Fits) -> Check {
    let fitted = &f.two.avatar;
    let ctx = ok(AvatarContext::new(fitted))?;
    let n = fitted.n_faces();
    let all = FaceRegion::all(n);
    let cam = ok(front_camera(128))?;
    let bg = [1.0; 3];
    let render_of = |a: &Avatar| -> Result<RenderOutput, String> {
        let scene = ok(avatar_scene(a, &ctx, &a.canonical, SurfelLayers::Both))?;
        Ok(render(&scene.surfels, &cam, bg))
    };

    // Whole-region both-mode transfer into an avatar with the same decoders.
    let mut other = fitted.clone();
    other.features = ok(init_feature_layer(n, fitted.model.k, 99))?;
    let moved = ok(transfer_features(fitted, &other, &all, &all, TransferMode::Both))?;
    let (a, b) = (render_of(fitted)?, render_of(&moved)?);
    ensure(a.color == b.color && a.alpha == b.alpha && a.id == b.id, || "both-mode transfer render differs".into())?;

    // Tex-only transfer keeps every surfel position.
    let donor = {
        let mut d = fitted.clone();
        d.features = ok(init_feature_layer(n, fitted.model.k, 7))?;
        d
    };
    let tex = ok(transfer_features(&donor, fitted, &all, &all, TransferMode::Tex))?;
    let p0 = ok(avatar_scene(fitted, &ctx, &fitted.canonical, SurfelLayers::Both))?;
    let p1 = ok(avatar_scene(&tex, &ctx, &tex.canonical, SurfelLayers::Both))?;
    ensure(p0.surfels.iter().zip(&p1.surfels).all(|(x, y)| x.position == y.position), || {
        "tex-only transfer moved surfels".into()
    })?;
    ensure(tex.features.tex != fitted.features.tex, || "tex-only transfer changed nothing".into())?;

    // Decoder inversion on a 10-face front-facing region.
    let out = render_of(fitted)?;
    let visible = pick_faces(&out, &Selection::Box([44.0, 40.0, 84.0, 80.0]));
    ensure(visible.len() >= 10, || format!("only {} faces near the image center", visible.len()))?;
    let region = FaceRegion::from_unchecked(visible.iter().step_by(visible.len() / 10).take(10).copied().collect());
    let target = [0.85, 0.2, 0.15];
    let (painted, rep) = ok(invert_color(fitted, &ctx, &region, &vec![target; 10], &InvertConfig::default()))?;
    let got = ok(face_mean_colors(&painted, &ctx, region.faces()))?;
    let linf = got.iter().flat_map(|c| (0..3).map(move |i| (c[i] - target[i]).abs())).fold(0.0, f64::max);
    ensure(linf <= 0.05, || format!("inversion L-inf error {linf:.4} after {} steps", rep.steps))?;

    // Stamp a half-black / half-white image from the front.
    let side = 128;
    let mut data = vec![0.0; 3 * side * side];
    for y in 0..side {
        for x in side / 2..side {
            for c in 0..3 {
                data[3 * (y * side + x) + c] = 1.0;
            }
        }
    }
    let image = RgbImage {
        width: side,
        height: side,
        data,
    };
    let stamp_region = FaceRegion::from_unchecked(pick_faces(&out, &Selection::Box([0.0, 0.0, side as f64, side as f64])));
    let (stamped, srep) = ok(stamp_texture(fitted, &ctx, &fitted.canonical, &image, &cam, &stamp_region, &InvertConfig::default()))?;
    let faces: Vec<usize> = srep.targets.iter().map(|(f, _)| *f).collect();
    let colors = ok(face_mean_colors(&stamped, &ctx, &faces))?;
    let base = ok(pose_frames(fitted, &ctx))?;
    let mut correct = 0;
    for (f, c) in faces.iter().zip(&colors) {
        let center = base[*f];
        let pc = cam.to_camera(&center);
        let px = cam.project_camera_point(&pc)[0];
        let white = px >= side as f64 / 2.0;
        let lum = (c[0] + c[1] + c[2]) / 3.0;
        if (lum >= 0.5) == white {
            correct += 1;
        }
    }
    let frac = correct as f64 / faces.len().max(1) as f64;
    ensure(!faces.is_empty() && frac >= 0.95, || {
        format!("stamp side correct on {correct} of {} front-facing faces ({:.1}%)", faces.len(), 100.0 * frac)
    })?;
    Ok(format!(
        "transfer renders bit-identical; tex transfer keeps {} positions; inversion L-inf {linf:.4} in {} steps; stamp side correct {correct}/{} ({:.1}%)",
        p0.surfels.len(),
        rep.steps,
        faces.len(),
        100.0 * frac
    ))
}

/// Canonical-pose morphed face centers.
fn pose_frames(a: &Avatar, ctx: &AvatarContext) -> gma_core::Result<Vec<Vec3>> {
    let scene = avatar_scene(a, ctx, &a.canonical, SurfelLayers::Coarse)?;
    Ok(scene.frames.iter().map(|f| f.center).collect())
}

// ---------------------------------------------------------------------------
// 8. Determinism and persistence

fn small_fit() -> gma_core::Result<Vec<u8>> {
    let body = small_body_config();
    let subject = generate_subject(&body, TextureSpec::default(), 5)?;
    let spec = RenderSpec {
        n_frames: 8,
        width: 32,
        height: 32,
        ..RenderSpec::default()
    };
    let ds = synthesize(&subject, &spec, 5)?;
    let cfg = FitConfig {
        stage1_steps: 40,
        stage2_steps: 40,
        seed: 5,
        ..FitConfig::default()
    };
    let (a, _) = fit(&body, &ds, &cfg, &mut FitHooks::default())?;
    persist::to_bytes(&a)
}

fn criterion_8() -> Check {
    let a = ok(small_fit())?;
    let b = ok(small_fit())?;
    ensure(a == b, || "two fits with the same seed and config differ".into())?;
    let dir = ok(tempfile::tempdir())?;
    let path = dir.path().join("a.gma");
    ok(std::fs::write(&path, &a))?;
    let loaded = ok(persist::load(&path))?;
    let again = ok(persist::to_bytes(&loaded))?;
    ensure(again == a, || "save/load/save changed the bytes".into())?;
    let reloaded = ok(persist::from_bytes(&again))?;
    ensure(reloaded == loaded, || "load is not bit-exact".into())?;
    let mut bad = a.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 0x10;
    match persist::from_bytes(&bad) {
        Err(gma_core::Error::Checkpoint(CheckpointError::Crc { .. })) => {}
        other => return Err(format!("corrupted checkpoint not rejected with a CRC error: {:?}", other.err())),
    }
    Ok(format!("identical {}-byte checkpoints from two fits; round trip bit-exact; flipped byte rejected by CRC", a.len()))
}

// ---------------------------------------------------------------------------
// 9. Service correctness

async fn call(app: &Router, method: &str, uri: &str, body: Vec<u8>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).body(Body::from(body)).expect("request");
    let resp = app.clone().oneshot(req).await.expect("infallible");
    let status = resp.status();
    (status, resp.into_body().collect().await.expect("body").to_bytes().to_vec())
}

async fn post(app: &Router, uri: &str, v: &Value) -> (StatusCode, Vec<u8>) {
    call(app, "POST", uri, serde_json::to_vec(v).expect("json")).await
}

async fn service_checks() -> Check {
    // One surfel, one face id: the pick oracle is the set of covered pixels.
    let one = [Surfel {
        position: Vec3::zeros(),
        scale: [0.05, 0.05],
        rotation: [1.0, 0.0, 0.0, 0.0],
        color: [0.2, 0.4, 0.6],
        face: 3,
    }];
    let c1 = ok(Camera::look_at(Vec3::new(0.0, 0.0, 3.0), Vec3::zeros(), Vec3::y(), 20.0, 20.0, 16, 16))?;
    let single = render(&one, &c1, [1.0; 3]);
    ensure(pick_faces(&single, &Selection::Box([0.0, 0.0, 16.0, 16.0])) == vec![3], || "one-face scene pick".into())?;

    let avatar = ok(generate_subject(&small_body_config(), TextureSpec::default(), 9))?.avatar;
    let session = ok(gma_service::Session::start(avatar.clone(), gma_service::ServiceConfig::default()))?;
    let app = gma_service::router(session.clone());
    let side = 64;
    let cam = ok(front_camera(side))?;
    let body = json!({"camera": cam.to_json(), "width": side, "height": side});
    let (s1, r1) = post(&app, "/v1/render", &body).await;
    let (s2, r2) = post(&app, "/v1/render", &body).await;
    ensure(s1 == StatusCode::OK && s2 == StatusCode::OK && r1 == r2, || "/render not byte-identical".into())?;

    // Single-pixel boxes against the library ID pass.
    let ids = ok(session.snapshot().render(&cam, None, [1.0; 3]))?.id;
    let mut picked = 0;
    for y in (0..side).step_by(3) {
        for x in (0..side).step_by(3) {
            let id = ids[y * side + x];
            let (xf, yf) = (x as f64, y as f64);
            let req = json!({"camera": cam.to_json(), "width": side, "height": side, "box": [xf, yf, xf + 1.0, yf + 1.0]});
            let (st, b) = post(&app, "/v1/pick", &req).await;
            let faces: Vec<usize> = serde_json::from_value(ok(serde_json::from_slice::<Value>(&b))?["faces"].clone()).unwrap_or_default();
            let expect: Vec<usize> = if id >= 0 { vec![id as usize] } else { vec![] };
            ensure(st == StatusCode::OK && faces == expect, || format!("/pick at ({x}, {y}): {faces:?} vs {expect:?}"))?;
            picked += (id >= 0) as usize;
        }
    }

    // Undo restores the checkpoint bytes.
    let (_, before) = call(&app, "GET", "/v1/checkpoint", vec![]).await;
    let visible = pick_faces(&ok(session.snapshot().render(&cam, None, [1.0; 3]))?, &Selection::Box([0.0, 0.0, 64.0, 64.0]));
    let edit = json!({"kind": "paint", "region": &visible[..5], "payload": {"color": [0.9, 0.1, 0.1]}});
    let (st, _) = post(&app, "/v1/edit", &edit).await;
    ensure(st == StatusCode::OK, || "paint edit failed".into())?;
    let (_, mid) = call(&app, "GET", "/v1/checkpoint", vec![]).await;
    let (st, _) = call(&app, "POST", "/v1/undo", vec![]).await;
    let (_, after) = call(&app, "GET", "/v1/checkpoint", vec![]).await;
    ensure(st == StatusCode::OK && mid != before && after == before, || "/undo did not restore the checkpoint bytes".into())?;

    // Ten concurrent edits equal their sequential replay in applied order.
    let start = session.snapshot().avatar.clone();
    let cmds: Vec<Value> = (0..10)
        .map(|i| {
            let region: Vec<usize> = visible.iter().skip(2 * i).take(5).copied().collect();
            let t = i as f64 / 9.0;
            json!({"kind": "paint", "region": region, "payload": {"color": [t, 0.5, 1.0 - t]}})
        })
        .collect();
    let tasks: Vec<_> = cmds
        .iter()
        .cloned()
        .map(|c| {
            let app = app.clone();
            tokio::spawn(async move { post(&app, "/v1/edit", &c).await })
        })
        .collect();
    let mut order = Vec::new();
    for (t, c) in tasks.into_iter().zip(&cmds) {
        let (st, b) = ok(t.await)?;
        ensure(st == StatusCode::OK, || format!("concurrent edit failed: {}", String::from_utf8_lossy(&b)))?;
        let v: Value = ok(serde_json::from_slice(&b))?;
        order.push((v["version"].as_u64().unwrap_or(0), c.clone()));
    }
    order.sort_by_key(|(v, _)| *v);
    let ctx = ok(AvatarContext::new(&start))?;
    let mut seq = start;
    for (_, c) in &order {
        let cmd: EditCommand = ok(serde_json::from_value(c.clone()))?;
        seq = ok(apply_edit(&seq, &ctx, &cmd))?.0;
    }
    let (_, server) = call(&app, "GET", "/v1/checkpoint", vec![]).await;
    ensure(server == ok(persist::to_bytes(&seq))?, || "concurrent edits differ from sequential replay".into())?;
    Ok(format!(
        "render byte-identical; one-face pick exact; {picked} pixel picks match the ID pass; undo byte-exact; 10 concurrent edits match sequential replay"
    ))
}

fn criterion_9() -> Check {
    let rt = ok(tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build())?;
    rt.block_on(service_checks())
}

// ---------------------------------------------------------------------------
// 11. Throughput

fn criterion_11(f: &Fits) -> Check {
    let a = &f.two.avatar;
    let ctx = ok(AvatarContext::new(a))?;
    let cam = ok(front_camera(256))?;
    let reps = 5;
    let (mut dec, mut tr, mut rd) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..reps {
        let t = Instant::now();
        let decoded = ok(decode(a, &ctx, DecodeSet::ALL))?;
        dec.push(t.elapsed().as_secs_f64() * 1e3);
        let t = Instant::now();
        let scene = ok(gma_core::edit::apply_body_params(a, &ctx, &decoded, &a.canonical))?;
        tr.push(t.elapsed().as_secs_f64() * 1e3);
        let t = Instant::now();
        let out = render(&scene.surfels, &cam, [1.0; 3]);
        rd.push(t.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    let med = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    Ok(format!(
        "256x256, {} faces, {} surfels, 1 thread, median of {reps}: decode {:.2} ms, transform {:.2} ms, render {:.2} ms (not gated)",
        a.n_faces(),
        a.n_faces() * (1 + a.model.n_k),
        med(&mut dec),
        med(&mut tr),
        med(&mut rd)
    ))
}

fn main() {
    // Fits and timings are specified single-threaded.
    rayon::ThreadPoolBuilder::new().num_threads(1).build_global().expect("rayon pool");
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |id: u32| wanted.is_empty() || wanted.contains(&id);
    let mut report = Report { lines: Vec::new() };
    let t = Instant::now();

    if want(1) {
        report.run(1, "gradient integrity", criterion_1);
    }
    if want(2) {
        report.run(2, "embedding oracles", criterion_2);
    }
    if want(3) {
        report.run(3, "loss fixed points and values", criterion_3);
    }
    if [4, 5, 6, 7, 11].iter().any(|&i| want(i)) {
        println!("running desk-scale fits (two-stage, one-stage, face-offset)...");
        match catch_unwind(run_fits) {
            Ok(Ok(fits)) => {
                let fits = Arc::new(fits);
                let list: [(u32, &'static str, fn(&Fits) -> Check); 5] = [
                    (4, "end-to-end fit", criterion_4),
                    (5, "two-stage ablation direction", criterion_5),
                    (6, "offset-mode ablation direction", criterion_6),
                    (7, "editing contracts", criterion_7),
                    (11, "throughput report", criterion_11),
                ];
                for (id, name, f) in list {
                    if want(id) {
                        let fits = fits.clone();
                        report.run(id, name, move || f(&fits));
                    }
                }
            }
            other => {
                let why = match other {
                    Ok(Err(e)) => e.to_string(),
                    _ => "fit panicked".into(),
                };
                for (id, name) in [(4, "end-to-end fit"), (5, "two-stage ablation direction"), (6, "offset-mode ablation direction"), (7, "editing contracts"), (11, "throughput report")] {
                    if want(id) {
                        report.run(id, name, || Err(format!("fit failed: {why}")));
                    }
                }
            }
        }
    }
    if want(8) {
        report.run(8, "determinism and persistence", criterion_8);
    }
    if want(9) {
        report.run(9, "service correctness", criterion_9);
    }

    let failed: Vec<u32> = report.lines.iter().filter(|l| !l.2).map(|l| l.0).collect();
    println!(
        "acceptance: {} passed, {} failed in {:.1} min",
        report.lines.len() - failed.len(),
        failed.len(),
        t.elapsed().as_secs_f64() / 60.0
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
