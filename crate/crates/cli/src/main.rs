//! `gma`: synthesize data, fit avatars, render, edit, evaluate and serve.
//!
//! Exit codes: 0 success, 1 bad input, 2 internal failure.

use std::fs;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use gma_core::body::{BodyConfig, BodyParams};
use gma_core::edit::{apply_edit, EditCommand, EditKind, InvertConfig, TransferMode};
use gma_core::gma::OffsetMode;
use gma_core::pipeline::{avatar_scene, Avatar, AvatarContext, SurfelLayers};
use gma_core::render::{color_to_rgb8, render, write_png, Camera, CameraJson};
use gma_core::synth::{generate_subject, load_dataset, render_dataset, RenderSpec, Split, TextureSpec};
use gma_core::train::{evaluate, fit, FitConfig, FitHooks};

#[derive(Parser)]
#[command(name = "gma", version, about = "Gaussian morphing avatars")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic subject into a dataset directory.
    Synth(SynthArgs),
    /// Fit an avatar to a dataset.
    Fit(FitArgs),
    /// Render one image from a checkpoint.
    Render(RenderArgs),
    /// Edit a checkpoint.
    #[command(subcommand)]
    Edit(EditCmd),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Write the morphed mesh as Wavefront OBJ.
    ExportMesh(ExportArgs),
    /// Run the editing service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON file with any of `body`, `render`, `texture`, `seed`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    frames: Option<usize>,
    /// Square image side in pixels.
    #[arg(long)]
    res: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `solid`, `checker(N)` or `stripes(N)`.
    #[arg(long)]
    texture: Option<TextureSpec>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SynthConfig {
    body: BodyConfig,
    render: RenderSpec,
    texture: TextureSpec,
    seed: u64,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON fit configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    stage1_steps: Option<u64>,
    #[arg(long)]
    stage2_steps: Option<u64>,
    /// Optimize everything at once instead of the two-stage schedule.
    #[arg(long)]
    one_stage: bool,
    /// Free per-face 3D offsets instead of normal offsets.
    #[arg(long)]
    face_offsets: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    downsample: Option<usize>,
    /// Progress log, one JSON record per step.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Write the per-stage loss history here.
    #[arg(long)]
    report_json: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    camera_json: PathBuf,
    /// JSON with any of `beta`, `theta`, `psi`; defaults to the canonical pose.
    #[arg(long)]
    pose_json: Option<PathBuf>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long, value_enum, default_value = "both")]
    layers: Layers,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Layers {
    Coarse,
    Fine,
    Both,
}

impl From<Layers> for SurfelLayers {
    fn from(l: Layers) -> Self {
        match l {
            Layers::Coarse => SurfelLayers::Coarse,
            Layers::Fine => SurfelLayers::Fine,
            Layers::Both => SurfelLayers::Both,
        }
    }
}

#[derive(Args, Clone)]
struct Target {
    #[arg(long)]
    ckpt: PathBuf,
    /// Face ids, e.g. `3,7,10-20`, or `all`.
    #[arg(long)]
    faces: Option<String>,
    /// JSON array of face ids.
    #[arg(long)]
    region_json: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct InvertArgs {
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Subcommand)]
enum EditCmd {
    /// Copy feature rows from another checkpoint.
    Transfer {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        source: PathBuf,
        /// Source faces; defaults to the target faces.
        #[arg(long)]
        source_faces: Option<String>,
        #[arg(long, value_enum, default_value = "both")]
        mode: Mode,
    },
    /// Recolor a region by decoder inversion.
    Paint {
        #[command(flatten)]
        target: Target,
        /// `r,g,b` in [0, 1].
        #[arg(long)]
        color: String,
        #[command(flatten)]
        invert: InvertArgs,
    },
    /// Project an image onto the front-facing faces of a region.
    Stamp {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        camera_json: PathBuf,
        #[arg(long)]
        pose_json: Option<PathBuf>,
        #[command(flatten)]
        invert: InvertArgs,
    },
    /// Replace the canonical shape coefficients.
    Shape {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated values.
        #[arg(long)]
        beta: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a raw edit command JSON file.
    Apply {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        command: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Geo,
    Tex,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Holdout,
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "holdout")]
    split: SplitArg,
    #[arg(long)]
    json_out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    pose_json: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Side of the streamed view before a client sets a camera.
    #[arg(long, default_value_t = 256)]
    view_size: usize,
}

/// Input problem that is not a library error (bad flag value, unreadable JSON).
#[derive(Debug)]
struct UserError(String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

fn user(msg: impl Into<String>) -> anyhow::Error {
    UserError(msg.into()).into()
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<UserError>() || cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 1;
        }
        if let Some(g) = cause.downcast_ref::<gma_core::Error>() {
            return if g.is_user_error() { 1 } else { 2 };
        }
    }
    2
}

fn echo(command: &str, config: serde_json::Value) -> Result<()> {
    let line = serde_json::to_string(&json!({ "command": command, "config": config }))?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}")?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).map_err(|e| user(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(v)?).with_context(|| format!("writing {}", path.display()))
}

fn load_ckpt(path: &Path) -> Result<Avatar> {
    gma_core::persist::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn parse_floats(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| user(format!("bad number `{t}` in --{what}"))))
        .collect()
}

/// `3,7,10-20` or `all`.
fn parse_faces(s: &str, n_faces: usize) -> Result<Vec<usize>> {
    if s.trim() == "all" {
        return Ok((0..n_faces).collect());
    }
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let bad = || user(format!("bad face list entry `{part}`"));
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    Ok(out)
}

fn region(t: &Target, n_faces: usize) -> Result<Vec<usize>> {
    match (&t.faces, &t.region_json) {
        (Some(f), None) => parse_faces(f, n_faces),
        (None, Some(p)) => read_json(p),
        _ => Err(user("give exactly one of --faces or --region-json")),
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PoseJson {
    beta: Option<Vec<f64>>,
    theta: Option<Vec<f64>>,
    psi: Option<Vec<f64>>,
}

fn pose(path: Option<&Path>, canonical: &BodyParams) -> Result<BodyParams> {
    let mut p = canonical.clone();
    let Some(path) = path else { return Ok(p) };
    let j: PoseJson = read_json(path)?;
    for (name, src, dst) in [("beta", j.beta, &mut p.beta), ("theta", j.theta, &mut p.theta), ("psi", j.psi, &mut p.psi)] {
        if let Some(v) = src {
            if v.len() != dst.len() {
                bail!(user(format!("pose `{name}` has {} values, expected {}", v.len(), dst.len())));
            }
            *dst = v;
        }
    }
    Ok(p)
}

fn camera(path: &Path, size: Option<(usize, usize)>) -> Result<Camera> {
    let j: CameraJson = read_json(path)?;
    let cam = Camera::from_json(&j, size)?;
    Ok(match size {
        Some((w, h)) if (w, h) != (cam.width, cam.height) => cam.with_size(w, h)?,
        _ => cam,
    })
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(n) = a.frames {
        cfg.render.n_frames = n;
    }
    if let Some(r) = a.res {
        cfg.render.width = r;
        cfg.render.height = r;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(t) = a.texture {
        cfg.texture = t;
    }
    echo("synth", json!({ "synth": cfg, "out": a.out }))?;
    let subject = generate_subject(&cfg.body, cfg.texture, cfg.seed)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let ds = render_dataset(&subject, &cfg.render, cfg.seed, &a.out)?;
    println!(
        "wrote {} frames of {}x{} to {}",
        ds.frames.len(),
        ds.width,
        ds.height,
        a.out.display()
    );
    Ok(())
}

fn cmd_fit(a: FitArgs) -> Result<()> {
    let mut cfg: FitConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => FitConfig::default(),
    };
    if let Some(n) = a.stage1_steps {
        cfg.stage1_steps = n;
    }
    if let Some(n) = a.stage2_steps {
        cfg.stage2_steps = n;
    }
    cfg.one_stage |= a.one_stage;
    if a.face_offsets {
        cfg.model.offset_mode = OffsetMode::Face;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(d) = a.downsample {
        cfg.downsample = d;
    }
    if let Some(n) = a.checkpoint_every {
        cfg.checkpoint_every = n;
    }
    cfg.validate()?;
    let ds = load_dataset(&a.data)?;
    echo("fit", json!({ "fit": cfg, "data": a.data, "out": a.out, "body": ds.body_config }))?;
    let mut log_file = match &a.log {
        Some(p) => Some(std::io::BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => None,
    };
    let mut hooks = FitHooks {
        log: log_file.as_mut().map(|f| f as &mut dyn std::io::Write),
        checkpoint_dir: a.checkpoint_dir.clone(),
    };
    let (avatar, report) = fit(&ds.body_config.clone(), &ds, &cfg, &mut hooks)?;
    drop(hooks);
    if let Some(mut f) = log_file {
        f.flush()?;
    }
    gma_core::persist::save(&avatar, &a.out)?;
    for s in &report.stages {
        let last = s.history.last().map(|l| l.total).unwrap_or(f64::NAN);
        println!("{}: {} steps, final loss {last:.5}, {:.1} s", s.name, s.steps, s.wall_ms / 1000.0);
    }
    if let Some(p) = &a.report_json {
        write_json(p, &report)?;
    }
    println!("saved {}", a.out.display());
    Ok(())
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let size = match (a.width, a.height) {
        (Some(w), Some(h)) => Some((w, h)),
        (None, None) => None,
        _ => bail!(user("give both --width and --height or neither")),
    };
    let avatar = load_ckpt(&a.ckpt)?;
    let cam = camera(&a.camera_json, size)?;
    let params = pose(a.pose_json.as_deref(), &avatar.canonical)?;
    echo(
        "render",
        json!({ "ckpt": a.ckpt, "camera": cam.to_json(), "params": params, "layers": a.layers, "out": a.out }),
    )?;
    let ctx = AvatarContext::new(&avatar)?;
    let scene = avatar_scene(&avatar, &ctx, &params, a.layers.into())?;
    let out = render(&scene.surfels, &cam, [1.0; 3]);
    write_png(&a.out, &color_to_rgb8(&out), out.width, out.height, 3)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn invert_config(a: &InvertArgs) -> InvertConfig {
    let mut c = InvertConfig::default();
    if let Some(v) = a.max_steps {
        c.max_steps = v;
    }
    if let Some(v) = a.tolerance {
        c.tolerance = v;
    }
    if let Some(v) = a.lr {
        c.lr = v;
    }
    c
}

fn cmd_edit(e: EditCmd) -> Result<()> {
    let (ckpt, out, build): (PathBuf, PathBuf, Box<dyn FnOnce(&Avatar) -> Result<EditCommand>>) = match e {
        EditCmd::Transfer {
            target,
            source,
            source_faces,
            mode,
        } => (
            target.ckpt.clone(),
            target.out.clone(),
            Box::new(move |a: &Avatar| {
                let src = load_ckpt(&source)?;
                let source_region = source_faces.map(|f| parse_faces(&f, src.n_faces())).transpose()?;
                let mode = match mode {
                    Mode::Geo => TransferMode::Geo,
                    Mode::Tex => TransferMode::Tex,
                    Mode::Both => TransferMode::Both,
                };
                Ok(EditCommand {
                    kind: EditKind::Transfer,
                    region: region(&target, a.n_faces())?,
                    payload: json!({ "source_path": source, "source_region": source_region, "mode": mode }),
                })
            }),
        ),
        EditCmd::Paint { target, color, invert } => (
            target.ckpt.clone(),
            target.out.clone(),
            Box::new(move |a: &Avatar| {
                let c = parse_floats(&color, "color")?;
                if c.len() != 3 {
                    bail!(user("--color needs three values"));
                }
                Ok(EditCommand {
                    kind: EditKind::Paint,
                    region: region(&target, a.n_faces())?,
                    payload: json!({ "color": c, "config": invert_config(&invert) }),
                })
            }),
        ),
        EditCmd::Stamp {
            target,
            image,
            camera_json,
            pose_json,
            invert,
        } => (
            target.ckpt.clone(),
            target.out.clone(),
            Box::new(move |a: &Avatar| {
                let cam: CameraJson = read_json(&camera_json)?;
                let params = pose(pose_json.as_deref(), &a.canonical)?;
                Ok(EditCommand {
                    kind: EditKind::Stamp,
                    region: region(&target, a.n_faces())?,
                    payload: json!({
                        "image_path": image,
                        "camera": cam,
                        "params": params,
                        "config": invert_config(&invert),
                    }),
                })
            }),
        ),
        EditCmd::Shape { ckpt, beta, out } => (
            ckpt,
            out,
            Box::new(move |_: &Avatar| {
                Ok(EditCommand {
                    kind: EditKind::Shape,
                    region: vec![],
                    payload: json!({ "values": parse_floats(&beta, "beta")? }),
                })
            }),
        ),
        EditCmd::Apply { ckpt, command, out } => (ckpt, out, Box::new(move |_: &Avatar| read_json(&command))),
    };
    let avatar = load_ckpt(&ckpt)?;
    let cmd = build(&avatar)?;
    echo("edit", json!({ "ckpt": ckpt, "out": out, "command": cmd }))?;
    let ctx = AvatarContext::new(&avatar)?;
    let (edited, outcome) = apply_edit(&avatar, &ctx, &cmd)?;
    gma_core::persist::save(&edited, &out)?;
    println!("{}", serde_json::to_string(&outcome)?);
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Holdout => Split::Holdout,
        SplitArg::All => Split::All,
    };
    echo("eval", json!({ "ckpt": a.ckpt, "data": a.data, "split": split, "json_out": a.json_out }))?;
    let avatar = load_ckpt(&a.ckpt)?;
    let ds = load_dataset(&a.data)?;
    if ds.body_config != avatar.body_config {
        bail!(user("checkpoint and dataset use different body configurations"));
    }
    let m = evaluate(&avatar, &ds, split)?;
    println!(
        "{} frames: psnr {:.3} dB, ssim {:.4}, iou {:.4}",
        m.per_frame.len(),
        m.mean_psnr,
        m.mean_ssim,
        m.mean_iou
    );
    if let Some(p) = &a.json_out {
        write_json(p, &m)?;
    }
    Ok(())
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    let avatar = load_ckpt(&a.ckpt)?;
    let params = pose(a.pose_json.as_deref(), &avatar.canonical)?;
    echo("export-mesh", json!({ "ckpt": a.ckpt, "params": params, "out": a.out }))?;
    let ctx = AvatarContext::new(&avatar)?;
    let scene = avatar_scene(&avatar, &ctx, &params, SurfelLayers::Coarse)?;
    let mut s = String::new();
    for v in &scene.morphed.vertices {
        s.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
    }
    for f in &ctx.body.faces {
        s.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    fs::write(&a.out, s).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "wrote {} vertices, {} faces to {}",
        scene.morphed.vertices.len(),
        ctx.body.faces.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    if a.view_size == 0 {
        bail!(user("--view-size must be positive"));
    }
    echo("serve", json!({ "ckpt": a.ckpt, "addr": a.addr, "view_size": a.view_size }))?;
    let avatar = load_ckpt(&a.ckpt)?;
    let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
    rt.block_on(async move {
        let config = gma_service::ServiceConfig {
            view_size: (a.view_size, a.view_size),
            ..Default::default()
        };
        let session = gma_service::Session::start(avatar, config)?;
        gma_service::serve(a.addr, session).await.map_err(|e| anyhow!(e).context(format!("serving on {}", a.addr)))
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Render(a) => cmd_render(a),
        Command::Edit(e) => cmd_edit(e),
        Command::Eval(a) => cmd_eval(a),
        Command::ExportMesh(a) => cmd_export(a),
        Command::Serve(a) => cmd_serve(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
