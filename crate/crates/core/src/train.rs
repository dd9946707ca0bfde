//! Two-stage fitting against a frame dataset, plus evaluation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::body::BodyConfig;
use crate::error::{Error, Result};
use crate::gma::{ModelConfig, OffsetMode};
use crate::losses::{ssim, total_loss, FrameTarget, GeometryInput, LossBreakdown, LossWeights};
use crate::pipeline::{
    build_scene, decode, displacement, scene_backward, Avatar, AvatarContext, DecodeSet, ParamGrads, SurfelLayers,
    Trainable,
};
use crate::render::{rasterize, rasterize_backward, render, to_u8, Camera, RenderOutput};
use crate::synth::{Dataset, Frame, Split};

/// PSNR reported for a perfect reconstruction.
pub const PSNR_CAP: f64 = 60.0;
/// Divergence threshold relative to a stage's first loss.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam moments keyed by parameter-group name, plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    moments: BTreeMap<String, Moments>,
}

/// One named tensor handed to [`adam_step`].
pub struct ParamGroup<'a> {
    pub name: String,
    pub params: &'a mut [f64],
    pub grads: &'a [f64],
    pub lr: f64,
    /// Treat `params` as packed unit quaternions and renormalize each after
    /// the update.
    pub quaternion: bool,
}

/// Bias-corrected Adam update of every group. Nothing is modified when any
/// gradient is non-finite.
pub fn adam_step(groups: &mut [ParamGroup], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    let step = state.step + 1;
    for g in groups.iter() {
        if g.params.len() != g.grads.len() {
            return Err(Error::Shape(format!(
                "group `{}`: {} params but {} grads",
                g.name,
                g.params.len(),
                g.grads.len()
            )));
        }
        if g.quaternion && g.params.len() % 4 != 0 {
            return Err(Error::Shape(format!("group `{}` is not a list of quaternions", g.name)));
        }
        if g.grads.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                group: g.name.clone(),
                step,
            });
        }
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for g in groups.iter_mut() {
        let mo = state.moments.entry(g.name.clone()).or_default();
        if mo.m.len() != g.params.len() {
            mo.m = vec![0.0; g.params.len()];
            mo.v = vec![0.0; g.params.len()];
        }
        for i in 0..g.params.len() {
            let gi = g.grads[i];
            mo.m[i] = cfg.beta1 * mo.m[i] + (1.0 - cfg.beta1) * gi;
            mo.v[i] = cfg.beta2 * mo.v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mh = mo.m[i] / bc1;
            let vh = mo.v[i] / bc2;
            g.params[i] -= g.lr * mh / (vh.sqrt() + cfg.eps);
        }
        if g.quaternion {
            for q in g.params.chunks_exact_mut(4) {
                let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    q.iter_mut().for_each(|v| *v /= n);
                }
            }
        }
    }
    state.step = step;
    Ok(())
}

/// Everything a fit depends on besides the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    pub stage1_weights: LossWeights,
    pub stage2_weights: LossWeights,
    /// Learning rate of the feature layer.
    pub lr_features: f64,
    /// Learning rate of the decoder weights.
    pub lr_mlp: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Frames averaged per step.
    pub batch: usize,
    /// Integer factor by which frames are downsampled for training.
    pub downsample: usize,
    /// Skip stage 1 and optimize everything with the stage-2 objective for
    /// `stage1_steps + stage2_steps` steps.
    pub one_stage: bool,
    pub model: ModelConfig,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
    /// Number of trailing total losses kept in the checkpoint metadata.
    pub loss_tail: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            stage1_steps: 2000,
            stage2_steps: 2000,
            stage1_weights: LossWeights::stage1(),
            stage2_weights: LossWeights::stage2(),
            lr_features: 5e-3,
            lr_mlp: 1e-3,
            adam: AdamConfig::default(),
            seed: 0,
            batch: 1,
            downsample: 1,
            one_stage: false,
            model: ModelConfig::default(),
            checkpoint_every: 0,
            loss_tail: 100,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.stage1_weights.validate()?;
        self.stage2_weights.validate()?;
        self.model.validate()?;
        if !(self.lr_features > 0.0 && self.lr_mlp > 0.0 && self.lr_features.is_finite() && self.lr_mlp.is_finite()) {
            return Err(Error::Config("learning rates must be positive and finite".into()));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {a:?}")));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if self.downsample == 0 {
            return Err(Error::Config("downsample must be >= 1".into()));
        }
        Ok(())
    }

    pub fn with_offset_mode(mut self, mode: OffsetMode) -> Self {
        self.model.offset_mode = mode;
        self
    }
}

/// Optional side outputs of a fit.
#[derive(Default)]
pub struct FitHooks<'a> {
    /// Newline-delimited JSON progress records.
    pub log: Option<&'a mut dyn Write>,
    /// Directory for periodic checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct LogRecord<'a> {
    step: u64,
    stage: &'a str,
    #[serde(flatten)]
    loss: &'a LossBreakdown,
    wall_ms: f64,
}

/// One optimization phase.
#[derive(Clone, Debug, PartialEq)]
pub struct StageSpec {
    pub name: &'static str,
    pub steps: u64,
    pub weights: LossWeights,
    pub layers: SurfelLayers,
    pub trainable: Trainable,
}

impl StageSpec {
    pub fn stage1(cfg: &FitConfig) -> Self {
        Self {
            name: "stage1",
            steps: cfg.stage1_steps,
            weights: cfg.stage1_weights.clone(),
            layers: SurfelLayers::Coarse,
            trainable: Trainable::ALL,
        }
    }

    pub fn stage2(cfg: &FitConfig) -> Self {
        Self {
            name: "stage2",
            steps: cfg.stage2_steps,
            weights: cfg.stage2_weights.clone(),
            layers: SurfelLayers::Both,
            trainable: Trainable::TEXTURE_STAGE,
        }
    }

    /// Ablation: the stage-2 objective from scratch with nothing frozen.
    pub fn one_stage(cfg: &FitConfig) -> Self {
        Self {
            name: "one_stage",
            steps: cfg.stage1_steps + cfg.stage2_steps,
            weights: cfg.stage2_weights.clone(),
            layers: SurfelLayers::Both,
            trainable: Trainable::ALL,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StageReport {
    pub name: String,
    pub steps: u64,
    pub history: Vec<LossBreakdown>,
    pub lr_halved: bool,
    pub wall_ms: f64,
}

impl StageReport {
    /// Mean total loss over `n` steps at the start and at the end.
    pub fn trend(&self, n: usize) -> Option<(f64, f64)> {
        if self.history.len() < n || n == 0 {
            return None;
        }
        let mean = |s: &[LossBreakdown]| s.iter().map(|b| b.total).sum::<f64>() / s.len() as f64;
        Some((mean(&self.history[..n]), mean(&self.history[self.history.len() - n..])))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FitReport {
    pub stages: Vec<StageReport>,
}

/// A frame prepared at training resolution.
#[derive(Clone, Debug)]
pub struct TrainFrame {
    pub frame_index: usize,
    pub camera: Camera,
    pub rgb: Vec<f64>,
    pub mask: Vec<f64>,
    pub params: crate::body::BodyParams,
}

fn box_downsample(img: &[f64], w: usize, h: usize, ch: usize, f: usize) -> Vec<f64> {
    let (ow, oh) = (w / f, h / f);
    let mut out = vec![0.0; ow * oh * ch];
    let norm = 1.0 / (f * f) as f64;
    for y in 0..oh {
        for x in 0..ow {
            for dy in 0..f {
                for dx in 0..f {
                    let src = ((y * f + dy) * w + x * f + dx) * ch;
                    for c in 0..ch {
                        out[(y * ow + x) * ch + c] += img[src + c] * norm;
                    }
                }
            }
        }
    }
    out
}

/// Training frames of `ds` at `1 / downsample` resolution.
pub fn training_frames(ds: &Dataset, downsample: usize) -> Result<Vec<TrainFrame>> {
    let f = downsample.max(1);
    if ds.width % f != 0 || ds.height % f != 0 {
        return Err(Error::Config(format!(
            "downsample factor {f} does not divide {}x{}",
            ds.width, ds.height
        )));
    }
    let frames = ds.frames_of(Split::Train);
    if frames.is_empty() {
        return Err(Error::Usage("dataset has no training frames".into()));
    }
    frames
        .into_iter()
        .map(|fr| {
            Ok(TrainFrame {
                frame_index: fr.index,
                camera: fr.camera.with_size(ds.width / f, ds.height / f)?,
                rgb: if f == 1 { fr.rgb.clone() } else { box_downsample(&fr.rgb, ds.width, ds.height, 3, f) },
                mask: if f == 1 { fr.mask.clone() } else { box_downsample(&fr.mask, ds.width, ds.height, 1, f) },
                params: fr.params.clone(),
            })
        })
        .collect()
}

/// Fresh avatar for a dataset: the dataset's body, the first frame's shape.
pub fn init_avatar(body_config: &BodyConfig, ds: &Dataset, cfg: &FitConfig) -> Result<Avatar> {
    let mut a = Avatar::init(body_config, &cfg.model, cfg.seed)?;
    if let Some(f) = ds.frames.first() {
        a.canonical.beta = f.params.beta.clone();
    }
    Ok(a)
}

/// Loss and parameter gradients for one frame.
pub fn frame_gradients(
    avatar: &Avatar,
    ctx: &AvatarContext,
    frame: &TrainFrame,
    background: [f64; 3],
    spec: &StageSpec,
) -> Result<(LossBreakdown, ParamGrads)> {
    let decoded = decode(avatar, ctx, DecodeSet::for_layers(spec.layers))?;
    let scene = build_scene(avatar, ctx, &decoded, &frame.params, spec.layers)?;
    let (out, record) = rasterize(&scene.surfels, &frame.camera, background);
    let disp = displacement(&scene);
    let geo = GeometryInput {
        morphed: &scene.morphed.vertices,
        base: &scene.base().vertices,
        laplacian_input: &disp,
        adjacency: &ctx.adjacency,
        edges: &ctx.edges,
    };
    let target = FrameTarget {
        rgb: &frame.rgb,
        mask: &frame.mask,
    };
    let (loss, grads) = total_loss(&out, &frame.camera, &target, Some(&geo), &spec.weights)?;
    let sg = rasterize_backward(&record, &out, &scene.surfels, &frame.camera, &grads.image)?;
    let pg = scene_backward(avatar, ctx, &decoded, &scene, &sg, Some(&grads.vertices), spec.trainable)?;
    Ok((loss, pg))
}

fn mlp_groups<'a>(
    prefix: &str,
    w: &'a mut crate::decoders::MlpWeights,
    g: &'a crate::decoders::MlpGrads,
    lr: f64,
    out: &mut Vec<ParamGroup<'a>>,
) {
    let names = ["w1", "b1", "w2", "b2"];
    for ((p, gr), n) in w.params_mut().into_iter().zip(g.slices()).zip(names) {
        out.push(ParamGroup {
            name: format!("{prefix}.{n}"),
            params: p,
            grads: gr,
            lr,
            quaternion: false,
        });
    }
}

/// Apply one Adam update to the trainable groups of `avatar`.
pub fn apply_grads(
    avatar: &mut Avatar,
    grads: &ParamGrads,
    trainable: Trainable,
    lr_features: f64,
    lr_mlp: f64,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    let mut groups = Vec::new();
    let feats = &mut avatar.features;
    if trainable.f_geo {
        groups.push(ParamGroup {
            name: "f_geo".into(),
            params: &mut feats.geo,
            grads: &grads.f_geo,
            lr: lr_features,
            quaternion: false,
        });
    }
    if trainable.f_tex {
        groups.push(ParamGroup {
            name: "f_tex".into(),
            params: &mut feats.tex,
            grads: &grads.f_tex,
            lr: lr_features,
            quaternion: false,
        });
    }
    let d = &mut avatar.decoders;
    if trainable.coarse {
        mlp_groups("coarse", &mut d.coarse, &grads.coarse, lr_mlp, &mut groups);
    }
    if trainable.fine {
        mlp_groups("fine", &mut d.fine, &grads.fine, lr_mlp, &mut groups);
    }
    if trainable.color {
        mlp_groups("color", &mut d.color, &grads.color, lr_mlp, &mut groups);
    }
    if trainable.scale {
        mlp_groups("scale", &mut d.scale, &grads.scale, lr_mlp, &mut groups);
    }
    adam_step(&mut groups, state, cfg)
}

fn frozen_snapshot(a: &Avatar, t: Trainable) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    if !t.f_geo {
        out.push(a.features.geo.clone());
    }
    if !t.f_tex {
        out.push(a.features.tex.clone());
    }
    let d = &a.decoders;
    for (on, w) in [(t.coarse, &d.coarse), (t.fine, &d.fine), (t.color, &d.color), (t.scale, &d.scale)] {
        if !on {
            out.extend(w.params().iter().map(|p| p.to_vec()));
        }
    }
    out
}

/// Run one optimization stage in place.
pub fn run_stage(
    avatar: &mut Avatar,
    ctx: &AvatarContext,
    frames: &[TrainFrame],
    background: [f64; 3],
    spec: &StageSpec,
    cfg: &FitConfig,
    hooks: &mut FitHooks,
    step_offset: u64,
) -> Result<StageReport> {
    cfg.validate()?;
    spec.weights.validate()?;
    if frames.is_empty() {
        return Err(Error::Usage("no training frames".into()));
    }
    let frozen_before = frozen_snapshot(avatar, spec.trainable);
    let mut report = StageReport {
        name: spec.name.to_string(),
        steps: spec.steps,
        ..Default::default()
    };
    let mut state = AdamState::default();
    let (mut lr_f, mut lr_m) = (cfg.lr_features, cfg.lr_mlp);
    let mut initial: Option<f64> = None;
    let t0 = Instant::now();
    for s in 0..spec.steps {
        let step = step_offset + s + 1;
        let ts = Instant::now();
        let mut loss = LossBreakdown::default();
        let mut grads: Option<ParamGrads> = None;
        for b in 0..cfg.batch {
            let frame = &frames[((s as usize) * cfg.batch + b) % frames.len()];
            let (l, g) = frame_gradients(avatar, ctx, frame, background, spec).map_err(|e| match e {
                Error::Precondition(m) if m.starts_with("non-finite loss") => Error::NonFiniteLoss { step },
                e => e,
            })?;
            accumulate(&mut loss, &l);
            match grads.as_mut() {
                Some(acc) => acc.add(&g),
                None => grads = Some(g),
            }
        }
        let mut grads = grads.expect("batch >= 1");
        if cfg.batch > 1 {
            let inv = 1.0 / cfg.batch as f64;
            grads.scale_by(inv);
            scale_breakdown(&mut loss, inv);
        }
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let init = *initial.get_or_insert(loss.total);
        if loss.total > DIVERGENCE_FACTOR * init {
            if report.lr_halved {
                return Err(Error::Diverged {
                    step,
                    loss: loss.total,
                    initial: init,
                });
            }
            log::warn!("{}: loss {} exceeds {DIVERGENCE_FACTOR}x initial {init} at step {step}; halving learning rates", spec.name, loss.total);
            report.lr_halved = true;
            lr_f *= 0.5;
            lr_m *= 0.5;
        }
        apply_grads(avatar, &grads, spec.trainable, lr_f, lr_m, &mut state, &cfg.adam).map_err(|e| match e {
            Error::NonFiniteGradient { group, .. } => Error::NonFiniteGradient { group, step },
            e => e,
        })?;
        if let Some(log) = hooks.log.as_mut() {
            let rec = LogRecord {
                step,
                stage: spec.name,
                loss: &loss,
                wall_ms: ts.elapsed().as_secs_f64() * 1e3,
            };
            let line = serde_json::to_string(&rec)?;
            writeln!(log, "{line}").map_err(|e| Error::io("<log>", e))?;
        }
        report.history.push(loss);
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            if let Some(dir) = &hooks.checkpoint_dir {
                save_progress(avatar, &report, cfg, dir, step)?;
            }
        }
    }
    report.wall_ms = t0.elapsed().as_secs_f64() * 1e3;
    if frozen_snapshot(avatar, spec.trainable) != frozen_before {
        return Err(Error::Precondition(format!("{}: a frozen tensor changed", spec.name)));
    }
    Ok(report)
}

fn accumulate(acc: &mut LossBreakdown, l: &LossBreakdown) {
    acc.lap += l.lap;
    acc.edge += l.edge;
    acc.normal += l.normal;
    acc.l1 += l.l1;
    acc.ssim += l.ssim;
    acc.mask += l.mask;
    acc.percep += l.percep;
    acc.total += l.total;
}

fn scale_breakdown(b: &mut LossBreakdown, s: f64) {
    for v in [&mut b.lap, &mut b.edge, &mut b.normal, &mut b.l1, &mut b.ssim, &mut b.mask, &mut b.percep, &mut b.total] {
        *v *= s;
    }
}

fn save_progress(avatar: &Avatar, report: &StageReport, cfg: &FitConfig, dir: &Path, step: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut a = avatar.clone();
    set_tail(&mut a, &report.history, cfg.loss_tail);
    crate::persist::save(&a, &dir.join(format!("step_{step:06}.gma")))
}

fn set_tail(a: &mut Avatar, history: &[LossBreakdown], n: usize) {
    let start = history.len().saturating_sub(n);
    a.meta.loss_tail = history[start..].iter().map(|b| b.total).collect();
}

/// Stage 1: coarse surfels only, everything trainable.
pub fn run_stage1(avatar: &mut Avatar, ds: &Dataset, cfg: &FitConfig, hooks: &mut FitHooks) -> Result<StageReport> {
    let ctx = AvatarContext::new(avatar)?;
    let frames = training_frames(ds, cfg.downsample)?;
    let r = run_stage(avatar, &ctx, &frames, ds.background, &StageSpec::stage1(cfg), cfg, hooks, 0)?;
    avatar.meta.stage1_steps = cfg.stage1_steps;
    Ok(r)
}

/// Stage 2: coarse and fine surfels, geometry features and the coarse
/// decoder frozen.
pub fn run_stage2(avatar: &mut Avatar, ds: &Dataset, cfg: &FitConfig, hooks: &mut FitHooks) -> Result<StageReport> {
    let ctx = AvatarContext::new(avatar)?;
    let frames = training_frames(ds, cfg.downsample)?;
    let r = run_stage(avatar, &ctx, &frames, ds.background, &StageSpec::stage2(cfg), cfg, hooks, cfg.stage1_steps)?;
    avatar.meta.stage2_steps = cfg.stage2_steps;
    Ok(r)
}

/// Full fit from a fresh avatar.
pub fn fit(body_config: &BodyConfig, ds: &Dataset, cfg: &FitConfig, hooks: &mut FitHooks) -> Result<(Avatar, FitReport)> {
    cfg.validate()?;
    let mut avatar = init_avatar(body_config, ds, cfg)?;
    let mut report = FitReport::default();
    if cfg.one_stage {
        let ctx = AvatarContext::new(&avatar)?;
        let frames = training_frames(ds, cfg.downsample)?;
        let r = run_stage(&mut avatar, &ctx, &frames, ds.background, &StageSpec::one_stage(cfg), cfg, hooks, 0)?;
        avatar.meta.stage1_steps = 0;
        avatar.meta.stage2_steps = cfg.stage1_steps + cfg.stage2_steps;
        avatar.meta.notes.push("one-stage ablation".into());
        report.stages.push(r);
    } else {
        report.stages.push(run_stage1(&mut avatar, ds, cfg, hooks)?);
        report.stages.push(run_stage2(&mut avatar, ds, cfg, hooks)?);
    }
    let history: Vec<LossBreakdown> = report.stages.iter().flat_map(|s| s.history.iter().cloned()).collect();
    set_tail(&mut avatar, &history, cfg.loss_tail);
    Ok((avatar, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub index: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_frame: Vec<FrameMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_iou: f64,
}

/// Render used for evaluation: both layers at dataset resolution over the
/// dataset background.
pub fn render_frame(avatar: &Avatar, ctx: &AvatarContext, frame: &Frame, background: [f64; 3]) -> Result<RenderOutput> {
    let scene = crate::pipeline::avatar_scene(avatar, ctx, &frame.params, SurfelLayers::Both)?;
    Ok(render(&scene.surfels, &frame.camera, background))
}

/// PSNR of 8-bit-quantized `pred` against `target` over `region` pixels,
/// capped at [`PSNR_CAP`].
pub fn psnr(pred: &[f64], target: &[f64], region: &[bool]) -> f64 {
    let mut se = 0.0;
    let mut n = 0usize;
    for (p, r) in region.iter().enumerate() {
        if !r {
            continue;
        }
        for c in 0..3 {
            let d = to_u8(pred[3 * p + c]) as f64 / 255.0 - target[3 * p + c];
            se += d * d;
        }
        n += 3;
    }
    if n == 0 || se == 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (n as f64 / se).log10()).min(PSNR_CAP)
}

/// Metrics of one frame.
pub fn frame_metrics(out: &RenderOutput, frame: &Frame) -> Result<FrameMetrics> {
    let pred_mask: Vec<bool> = out.alpha.iter().map(|&a| a >= 0.5).collect();
    let gt_mask: Vec<bool> = frame.mask.iter().map(|&m| m >= 0.5).collect();
    let union: Vec<bool> = pred_mask.iter().zip(&gt_mask).map(|(a, b)| *a || *b).collect();
    let n_union = union.iter().filter(|u| **u).count();
    let n_inter = pred_mask.iter().zip(&gt_mask).filter(|(a, b)| **a && **b).count();
    let iou = if n_union == 0 { 1.0 } else { n_inter as f64 / n_union as f64 };
    let region = if n_union == 0 { vec![true; union.len()] } else { union };
    let quant: Vec<f64> = out.color.iter().map(|v| to_u8(*v) as f64 / 255.0).collect();
    Ok(FrameMetrics {
        index: frame.index,
        psnr: psnr(&out.color, &frame.rgb, &region),
        ssim: ssim(&quant, &frame.rgb, out.width, out.height, 3)?,
        iou,
    })
}

/// Render every frame of `split` and score it.
pub fn evaluate(avatar: &Avatar, ds: &Dataset, split: Split) -> Result<Metrics> {
    let frames = ds.frames_of(split);
    if frames.is_empty() {
        return Err(Error::Usage(format!("split {split:?} is empty")));
    }
    let ctx = AvatarContext::new(avatar)?;
    use rayon::prelude::*;
    let per_frame = frames
        .par_iter()
        .map(|f| frame_metrics(&render_frame(avatar, &ctx, f, ds.background)?, f))
        .collect::<Result<Vec<_>>>()?;
    let n = per_frame.len() as f64;
    Ok(Metrics {
        mean_psnr: per_frame.iter().map(|m| m.psnr).sum::<f64>() / n,
        mean_ssim: per_frame.iter().map(|m| m.ssim).sum::<f64>() / n,
        mean_iou: per_frame.iter().map(|m| m.iou).sum::<f64>() / n,
        per_frame,
    })
}

/// Laplacian loss of the morphed mesh in the canonical pose.
pub fn morphed_laplacian(avatar: &Avatar) -> Result<f64> {
    Ok(mesh_laplacians(avatar)?.0)
}

/// Laplacian loss of the morphed mesh's positions and of its displacement
/// from the posed body, both in the canonical pose. The second is the term
/// training penalizes.
pub fn mesh_laplacians(avatar: &Avatar) -> Result<(f64, f64)> {
    let ctx = AvatarContext::new(avatar)?;
    let decoded = decode(avatar, &ctx, DecodeSet::for_layers(SurfelLayers::Coarse))?;
    let scene = build_scene(avatar, &ctx, &decoded, &avatar.canonical, SurfelLayers::Coarse)?;
    let abs = crate::losses::laplacian_loss(&scene.morphed.vertices, &ctx.adjacency)?.0;
    let disp = crate::losses::laplacian_loss(&displacement(&scene), &ctx.adjacency)?.0;
    Ok((abs, disp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_subject, small_body_config, synthesize, RenderSpec, TextureSpec};

    fn toy(n_frames: usize, res: usize) -> (Dataset, BodyConfig) {
        let body = small_body_config();
        let s = generate_subject(&body, TextureSpec::default(), 5).unwrap();
        let spec = RenderSpec {
            n_frames,
            width: res,
            height: res,
            ..RenderSpec::default()
        };
        (synthesize(&s, &spec, 5).unwrap(), body)
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut p = vec![1.0, -2.0, 3.0];
        let g = vec![0.0; 3];
        let mut st = AdamState::default();
        let mut groups = vec![ParamGroup {
            name: "x".into(),
            params: &mut p,
            grads: &g,
            lr: 0.1,
            quaternion: false,
        }];
        adam_step(&mut groups, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = vec![0.5];
        let g = vec![2.0];
        let mut st = AdamState::default();
        let mut groups = vec![ParamGroup {
            name: "x".into(),
            params: &mut p,
            grads: &g,
            lr: 0.01,
            quaternion: false,
        }];
        adam_step(&mut groups, &mut st, &AdamConfig::default()).unwrap();
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let expect = 0.5 - 0.01 * 2.0 / (2.0 + 1e-8);
        assert!((p[0] - expect).abs() < 1e-15);
        assert!((p[0] - 0.49).abs() < 1e-6);
    }

    #[test]
    fn groups_use_their_own_lr() {
        let (mut a, mut b) = (vec![0.0; 2], vec![0.0; 2]);
        let g = vec![1.0, -1.0];
        let mut st = AdamState::default();
        let mut groups = vec![
            ParamGroup {
                name: "a".into(),
                params: &mut a,
                grads: &g,
                lr: 0.1,
                quaternion: false,
            },
            ParamGroup {
                name: "b".into(),
                params: &mut b,
                grads: &g,
                lr: 0.001,
                quaternion: false,
            },
        ];
        adam_step(&mut groups, &mut st, &AdamConfig::default()).unwrap();
        assert!((a[0] + 0.1).abs() < 1e-6 && (a[1] - 0.1).abs() < 1e-6);
        assert!((b[0] + 0.001).abs() < 1e-8 && (b[1] - 0.001).abs() < 1e-8);
    }

    #[test]
    fn quaternions_renormalized() {
        let mut q = vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let g = vec![0.3, -0.2, 0.5, 0.1, 0.0, 0.4, -0.3, 0.2];
        let mut st = AdamState::default();
        let mut groups = vec![ParamGroup {
            name: "q".into(),
            params: &mut q,
            grads: &g,
            lr: 0.1,
            quaternion: true,
        }];
        adam_step(&mut groups, &mut st, &AdamConfig::default()).unwrap();
        for c in q.chunks(4) {
            assert!((c.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn nan_gradient_names_group_and_step() {
        let mut p = vec![0.0; 2];
        let g = vec![0.0, f64::NAN];
        let mut st = AdamState {
            step: 4,
            ..Default::default()
        };
        let mut groups = vec![ParamGroup {
            name: "color.w2".into(),
            params: &mut p,
            grads: &g,
            lr: 0.1,
            quaternion: false,
        }];
        match adam_step(&mut groups, &mut st, &AdamConfig::default()) {
            Err(Error::NonFiniteGradient { group, step }) => {
                assert_eq!(group, "color.w2");
                assert_eq!(step, 5);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(p, vec![0.0; 2]);
    }

    #[test]
    fn zero_steps_leave_avatar_unchanged() {
        let (ds, body) = toy(2, 32);
        let cfg = FitConfig {
            stage1_steps: 0,
            stage2_steps: 0,
            ..FitConfig::default()
        };
        let (a, _) = fit(&body, &ds, &cfg, &mut FitHooks::default()).unwrap();
        assert_eq!(a, init_avatar(&body, &ds, &cfg).unwrap());
    }

    #[test]
    fn stage1_descends_on_one_frame() {
        let (ds, body) = toy(1, 32);
        let cfg = FitConfig {
            stage1_steps: 200,
            stage2_steps: 0,
            ..FitConfig::default()
        };
        let mut a = init_avatar(&body, &ds, &cfg).unwrap();
        let r = run_stage1(&mut a, &ds, &cfg, &mut FitHooks::default()).unwrap();
        let first = r.history.first().unwrap().l1;
        let last = r.history.last().unwrap().l1;
        assert!(last < first, "L1 {first} -> {last}");
    }

    #[test]
    fn stage2_freezes_geometry_and_fit_is_deterministic() {
        let (ds, body) = toy(3, 32);
        let cfg = FitConfig {
            stage1_steps: 5,
            stage2_steps: 5,
            ..FitConfig::default()
        };
        let mut a = init_avatar(&body, &ds, &cfg).unwrap();
        run_stage1(&mut a, &ds, &cfg, &mut FitHooks::default()).unwrap();
        let geo = a.features.geo.clone();
        let coarse = a.decoders.coarse.clone();
        let tex = a.features.tex.clone();
        let mut log = Vec::new();
        let r = run_stage2(
            &mut a,
            &ds,
            &cfg,
            &mut FitHooks {
                log: Some(&mut log),
                checkpoint_dir: None,
            },
        )
        .unwrap();
        assert_eq!(a.features.geo, geo);
        assert_eq!(a.decoders.coarse, coarse);
        assert_ne!(a.features.tex, tex);
        assert_eq!(r.history.len(), 5);
        let text = String::from_utf8(log).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0]["step"], 6);
        assert_eq!(lines[0]["stage"], "stage2");
        assert!(lines[0]["total"].as_f64().unwrap() > 0.0 && lines[0]["wall_ms"].is_number());

        let (x, _) = fit(&body, &ds, &cfg, &mut FitHooks::default()).unwrap();
        let (y, _) = fit(&body, &ds, &cfg, &mut FitHooks::default()).unwrap();
        assert_eq!(crate::persist::to_bytes(&x).unwrap(), crate::persist::to_bytes(&y).unwrap());
    }

    #[test]
    fn checkpoints_written_periodically() {
        let (ds, body) = toy(2, 32);
        let dir = tempfile::tempdir().unwrap();
        let cfg = FitConfig {
            stage1_steps: 4,
            stage2_steps: 2,
            checkpoint_every: 2,
            ..FitConfig::default()
        };
        fit(
            &body,
            &ds,
            &cfg,
            &mut FitHooks {
                log: None,
                checkpoint_dir: Some(dir.path().to_path_buf()),
            },
        )
        .unwrap();
        for s in [2, 4, 6] {
            let p = dir.path().join(format!("step_{s:06}.gma"));
            crate::persist::load(&p).unwrap();
        }
    }

    #[test]
    fn subject_evaluates_at_cap() {
        let s = generate_subject(&small_body_config(), TextureSpec::default(), 8).unwrap();
        let spec = RenderSpec {
            n_frames: 8,
            width: 40,
            height: 40,
            ..RenderSpec::default()
        };
        let ds = synthesize(&s, &spec, 8).unwrap();
        let m = evaluate(&s.avatar, &ds, Split::All).unwrap();
        for f in &m.per_frame {
            assert_eq!(f.psnr, PSNR_CAP);
            assert!((f.ssim - 1.0).abs() < 1e-12);
            assert_eq!(f.iou, 1.0);
        }
        let mean = m.per_frame.iter().map(|f| f.psnr).sum::<f64>() / m.per_frame.len() as f64;
        assert_eq!(m.mean_psnr, mean);
        assert!(matches!(
            evaluate(&s.avatar, &Dataset { frames: vec![], ..ds }, Split::Holdout),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn psnr_of_known_error() {
        // Uniform error of 1/255 on every channel gives 20 log10(255).
        let target = vec![0.0; 12];
        let pred = vec![1.0 / 255.0; 12];
        let p = psnr(&pred, &target, &[true; 4]);
        assert!((p - 20.0 * 255f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn downsample_averages_blocks() {
        let img: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let d = box_downsample(&img, 4, 4, 1, 2);
        assert_eq!(d, vec![2.5, 4.5, 10.5, 12.5]);
    }
}
