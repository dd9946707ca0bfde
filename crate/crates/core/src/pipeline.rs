//! Avatar state and the differentiable path from features to surfels:
//! decode, morph, embed. The reverse pass maps surfel gradients back onto
//! features and decoder weights.
//!
//! Decoders read the feature row and the encoded *template* face center, so
//! decoded quantities do not depend on pose, shape or expression.

use ndarray::{concatenate, s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::body::{
    build_procedural_body, face_frame_backward, face_frames, pose_mesh, unique_edges, BodyConfig, BodyParams, FaceFrame,
    FaceFrameGrad, MeshState, SkinnedBody,
};
use crate::decoders::{
    coarse_head, coarse_head_backward, color_head, color_head_backward, fine_head, fine_head_backward, scale_head,
    scale_head_backward, Decoders, GradTape, MlpGrads,
};
use crate::error::{Error, Result};
use crate::geom::{Mat3, Vec3};
use crate::gma::{
    encode_position, init_feature_layer, morph_mesh, morph_mesh_free, uvd_position, FeatureLayer, Incidence, ModelConfig,
    MorphedMesh, OffsetMode, Surfel, SurfelSet, UvdCoord,
};
use crate::losses::Adjacency;
use crate::render::SurfelGrads;

/// Everything that defines an avatar.
#[derive(Clone, Debug, PartialEq)]
pub struct Avatar {
    pub body_config: BodyConfig,
    pub model: ModelConfig,
    /// Parameters of the canonical pose used when no frame pose is given.
    pub canonical: BodyParams,
    pub features: FeatureLayer,
    pub decoders: Decoders,
    pub meta: FitMeta,
}

/// Bookkeeping carried along with the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub seed: u64,
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    /// Total loss of the last few optimization steps.
    pub loss_tail: Vec<f64>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl Avatar {
    /// Fresh avatar: features from N(0, 0.01^2) and initialized decoders.
    pub fn init(body_config: &BodyConfig, model: &ModelConfig, seed: u64) -> Result<Self> {
        body_config.validate()?;
        model.validate()?;
        let body = build_procedural_body(body_config)?;
        Ok(Self {
            body_config: body_config.clone(),
            model: model.clone(),
            canonical: body.zero_params(),
            features: init_feature_layer(body.n_faces(), model.k, seed)?,
            decoders: Decoders::init(model, seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1)),
            meta: FitMeta {
                seed,
                ..Default::default()
            },
        })
    }

    pub fn n_faces(&self) -> usize {
        self.features.n_faces
    }

    /// Dimension consistency between body, features and decoders.
    pub fn check(&self) -> Result<()> {
        self.model.validate()?;
        self.decoders.check(&self.model)?;
        if self.features.k != self.model.k {
            return Err(Error::Compatibility(format!(
                "feature width {} differs from model k {}",
                self.features.k, self.model.k
            )));
        }
        let n = self.features.n_faces * self.features.k;
        if self.features.geo.len() != n || self.features.tex.len() != n {
            return Err(Error::Shape("feature arrays do not match n_faces x k".into()));
        }
        Ok(())
    }
}

/// Derived, non-persisted data for an avatar's body.
#[derive(Clone, Debug)]
pub struct AvatarContext {
    pub body: SkinnedBody,
    pub incidence: Incidence,
    pub adjacency: Adjacency,
    pub edges: Vec<[usize; 2]>,
    /// Positional encoding of every template face center, `N_f x 6 n_freq`.
    pub encodings: Array2<f64>,
}

impl AvatarContext {
    pub fn new(avatar: &Avatar) -> Result<Self> {
        avatar.check()?;
        let body = build_procedural_body(&avatar.body_config)?;
        if body.n_faces() != avatar.features.n_faces {
            return Err(Error::Compatibility(format!(
                "body has {} faces but the feature layer has {} rows",
                body.n_faces(),
                avatar.features.n_faces
            )));
        }
        let incidence = Incidence::new(body.n_vertices(), &body.faces);
        incidence.check_connected()?;
        let edges = unique_edges(&body.faces);
        let adjacency = Adjacency::from_edges(body.n_vertices(), &edges)?;
        let nf = avatar.model.n_freq;
        let mut encodings = Array2::zeros((body.n_faces(), 6 * nf));
        for (fi, f) in body.faces.iter().enumerate() {
            let c = (body.template_vertices[f[0]] + body.template_vertices[f[1]] + body.template_vertices[f[2]]) / 3.0;
            for (j, v) in encode_position(&c, nf).into_iter().enumerate() {
                encodings[(fi, j)] = v;
            }
        }
        Ok(Self {
            body,
            incidence,
            adjacency,
            edges,
            encodings,
        })
    }
}

/// Which surfel layers to render.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SurfelLayers {
    Coarse,
    Fine,
    #[default]
    Both,
}

impl SurfelLayers {
    pub fn coarse(self) -> bool {
        matches!(self, SurfelLayers::Coarse | SurfelLayers::Both)
    }

    pub fn fine(self) -> bool {
        matches!(self, SurfelLayers::Fine | SurfelLayers::Both)
    }
}

/// Which decoder outputs to compute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeSet {
    pub coarse: bool,
    pub fine: bool,
    pub color: bool,
    pub scale: bool,
}

impl DecodeSet {
    pub const ALL: Self = Self {
        coarse: true,
        fine: true,
        color: true,
        scale: true,
    };

    /// Outputs needed to render `layers`.
    pub fn for_layers(layers: SurfelLayers) -> Self {
        Self {
            coarse: true,
            fine: layers.fine(),
            color: true,
            scale: layers.fine(),
        }
    }
}

/// Per-face offsets as decoded.
#[derive(Clone, Debug, PartialEq)]
pub enum FaceOffsets {
    Normal(Vec<f64>),
    /// Local-frame vectors (tangent, bitangent, normal components).
    Face(Vec<Vec3>),
}

struct Tape {
    raw: Array2<f64>,
    tape: GradTape,
}

/// Decoder outputs of one evaluation. Fine quantities are indexed
/// `face * n_k + k`.
pub struct Decoded {
    pub offsets: FaceOffsets,
    pub uvd: Option<Vec<UvdCoord>>,
    pub colors: Option<Vec<[f64; 3]>>,
    pub scales: Option<Vec<[f64; 2]>>,
    coarse_tape: Tape,
    fine_tape: Option<Tape>,
    color_tape: Option<Tape>,
    scale_tape: Option<Tape>,
}

fn feature_matrix(rows: &[f64], n: usize, k: usize) -> Array2<f64> {
    Array2::from_shape_vec((n, k), rows.to_vec()).expect("feature layout")
}

/// Run the requested decoders over all faces.
pub fn decode(avatar: &Avatar, ctx: &AvatarContext, set: DecodeSet) -> Result<Decoded> {
    let (n, k) = (avatar.features.n_faces, avatar.features.k);
    let m = &avatar.model;
    let geo_in = concatenate(Axis(1), &[feature_matrix(&avatar.features.geo, n, k).view(), ctx.encodings.view()])
        .expect("same rows");
    let tex_needed = set.color || set.scale;
    let tex_in = if tex_needed {
        Some(
            concatenate(Axis(1), &[feature_matrix(&avatar.features.tex, n, k).view(), ctx.encodings.view()])
                .expect("same rows"),
        )
    } else {
        None
    };

    let (raw, tape) = avatar.decoders.coarse.forward_batch(geo_in.view())?;
    let flat = raw.as_slice().expect("contiguous");
    let offsets = match m.offset_mode {
        OffsetMode::Normal => FaceOffsets::Normal(coarse_head(flat, m.max_offset)),
        OffsetMode::Face => FaceOffsets::Face(
            coarse_head(flat, m.max_offset)
                .chunks_exact(3)
                .map(|c| Vec3::new(c[0], c[1], c[2]))
                .collect(),
        ),
    };
    let coarse_tape = Tape { raw, tape };

    let mut out = Decoded {
        offsets,
        uvd: None,
        colors: None,
        scales: None,
        coarse_tape,
        fine_tape: None,
        color_tape: None,
        scale_tape: None,
    };
    if set.fine {
        let (raw, tape) = avatar.decoders.fine.forward_batch(geo_in.view())?;
        out.uvd = Some(fine_head(raw.as_slice().expect("contiguous"), m.max_d));
        out.fine_tape = Some(Tape { raw, tape });
    }
    if let Some(tex_in) = &tex_in {
        if set.color {
            let (raw, tape) = avatar.decoders.color.forward_batch(tex_in.view())?;
            out.colors = Some(color_head(raw.as_slice().expect("contiguous")));
            out.color_tape = Some(Tape { raw, tape });
        }
        if set.scale {
            let (raw, tape) = avatar.decoders.scale.forward_batch(tex_in.view())?;
            out.scales = Some(scale_head(raw.as_slice().expect("contiguous"), m.max_scale_factor));
            out.scale_tape = Some(Tape { raw, tape });
        }
    }
    Ok(out)
}

impl Decoded {
    /// Coarse surfel colors: per-face mean of the fine colors.
    pub fn coarse_colors(&self, n_k: usize) -> Option<Vec<[f64; 3]>> {
        self.colors
            .as_ref()
            .map(|c| c.chunks_exact(n_k).map(crate::decoders::coarse_color).collect())
    }
}

/// Posed, morphed and embedded avatar for one set of body parameters.
#[derive(Clone, Debug)]
pub struct Scene {
    pub morphed: MorphedMesh,
    pub frames: Vec<FaceFrame>,
    pub surfels: SurfelSet,
    pub layers: SurfelLayers,
    /// Number of leading coarse surfels in `surfels`.
    pub n_coarse: usize,
    /// Base-mesh face rotations (face-offset mode only).
    base_rotations: Option<Vec<Mat3>>,
    /// Whether each vertex offset hit the clamp (per component in face mode).
    clamped: Vec<[bool; 3]>,
}

impl Scene {
    pub fn base(&self) -> &MeshState {
        &self.morphed.base
    }
}

/// Pose the body and place surfels from decoded quantities.
pub fn build_scene(
    avatar: &Avatar,
    ctx: &AvatarContext,
    decoded: &Decoded,
    params: &BodyParams,
    layers: SurfelLayers,
) -> Result<Scene> {
    let base = pose_mesh(&ctx.body, params)?;
    let faces = &ctx.body.faces;
    let m = &avatar.model;
    let inc = &ctx.incidence;
    let (morphed, base_rotations, clamped) = match &decoded.offsets {
        FaceOffsets::Normal(o) => {
            let mut scales = Vec::with_capacity(inc.n_vertices());
            let mut clamped = Vec::with_capacity(inc.n_vertices());
            for v in 0..inc.n_vertices() {
                let fs = inc.of(v);
                let mean = fs.iter().map(|&f| o[f]).sum::<f64>() / fs.len() as f64;
                let c = mean.clamp(-m.max_offset, m.max_offset);
                clamped.push([c != mean, false, false]);
                scales.push(c);
            }
            (morph_mesh(&base, &scales)?, None, clamped)
        }
        FaceOffsets::Face(o) => {
            let rots: Vec<Mat3> = face_frames(&base.vertices, faces)?.iter().map(|f| f.rotation_matrix()).collect();
            let world: Vec<Vec3> = o.iter().zip(&rots).map(|(v, r)| r * v).collect();
            let mut vecs = Vec::with_capacity(inc.n_vertices());
            let mut clamped = Vec::with_capacity(inc.n_vertices());
            for v in 0..inc.n_vertices() {
                let fs = inc.of(v);
                let mean = fs.iter().map(|&f| world[f]).sum::<Vec3>() / fs.len() as f64;
                let c = mean.map(|x| x.clamp(-m.max_offset, m.max_offset));
                clamped.push([c.x != mean.x, c.y != mean.y, c.z != mean.z]);
                vecs.push(c);
            }
            (morph_mesh_free(&base, &vecs)?, Some(rots), clamped)
        }
    };
    let frames = morphed.frames(faces)?;
    let n_k = m.n_k;
    let mut surfels = Vec::new();
    let mut n_coarse = 0;
    if layers.coarse() {
        let colors = decoded
            .coarse_colors(n_k)
            .ok_or_else(|| Error::Precondition("coarse surfels need decoded colors".into()))?;
        surfels.extend(frames.iter().zip(colors).enumerate().map(|(fi, (fr, c))| Surfel {
            position: fr.center,
            scale: [fr.area_scale, fr.area_scale],
            rotation: fr.rotation,
            color: c,
            face: fi,
        }));
        n_coarse = frames.len();
    }
    if layers.fine() {
        let (Some(uvd), Some(colors), Some(scales)) = (&decoded.uvd, &decoded.colors, &decoded.scales) else {
            return Err(Error::Precondition("fine surfels need decoded uvd, colors and scales".into()));
        };
        for (fi, (f, fr)) in faces.iter().zip(&frames).enumerate() {
            let v = [morphed.vertices[f[0]], morphed.vertices[f[1]], morphed.vertices[f[2]]];
            for k in 0..n_k {
                let j = fi * n_k + k;
                surfels.push(Surfel {
                    position: uvd_position(&v, &fr.normal, &uvd[j]),
                    scale: [fr.area_scale * scales[j][0], fr.area_scale * scales[j][1]],
                    rotation: fr.rotation,
                    color: colors[j],
                    face: fi,
                });
            }
        }
    }
    Ok(Scene {
        morphed,
        frames,
        surfels,
        layers,
        n_coarse,
        base_rotations,
        clamped,
    })
}

/// Which tensors receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trainable {
    pub f_geo: bool,
    pub f_tex: bool,
    pub coarse: bool,
    pub fine: bool,
    pub color: bool,
    pub scale: bool,
}

impl Trainable {
    pub const ALL: Self = Self {
        f_geo: true,
        f_tex: true,
        coarse: true,
        fine: true,
        color: true,
        scale: true,
    };

    /// Geometry path frozen.
    pub const TEXTURE_STAGE: Self = Self {
        f_geo: false,
        f_tex: true,
        coarse: false,
        fine: true,
        color: true,
        scale: true,
    };

    pub const FEATURES_ONLY: Self = Self {
        f_geo: true,
        f_tex: true,
        coarse: false,
        fine: false,
        color: false,
        scale: false,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub f_geo: Vec<f64>,
    pub f_tex: Vec<f64>,
    pub coarse: MlpGrads,
    pub fine: MlpGrads,
    pub color: MlpGrads,
    pub scale: MlpGrads,
}

impl ParamGrads {
    pub fn zeros(avatar: &Avatar) -> Self {
        let d = &avatar.decoders;
        Self {
            f_geo: vec![0.0; avatar.features.geo.len()],
            f_tex: vec![0.0; avatar.features.tex.len()],
            coarse: d.coarse.zero_grads(),
            fine: d.fine.zero_grads(),
            color: d.color.zero_grads(),
            scale: d.scale.zero_grads(),
        }
    }

    pub fn add(&mut self, o: &ParamGrads) {
        self.f_geo.iter_mut().zip(&o.f_geo).for_each(|(a, b)| *a += b);
        self.f_tex.iter_mut().zip(&o.f_tex).for_each(|(a, b)| *a += b);
        for (a, b) in [
            (&mut self.coarse, &o.coarse),
            (&mut self.fine, &o.fine),
            (&mut self.color, &o.color),
            (&mut self.scale, &o.scale),
        ] {
            a.w1 += &b.w1;
            a.b1 += &b.b1;
            a.w2 += &b.w2;
            a.b2 += &b.b2;
        }
    }

    pub fn scale_by(&mut self, s: f64) {
        self.f_geo.iter_mut().for_each(|v| *v *= s);
        self.f_tex.iter_mut().for_each(|v| *v *= s);
        for g in [&mut self.coarse, &mut self.fine, &mut self.color, &mut self.scale] {
            g.w1 *= s;
            g.b1 *= s;
            g.w2 *= s;
            g.b2 *= s;
        }
    }
}

fn add_rotation_grad(g: &mut FaceFrameGrad, gr: &Mat3) {
    g.tangent += gr.column(0);
    g.bitangent += gr.column(1);
    g.normal += gr.column(2);
}

/// Accumulate `dL/d(input)` rows into a feature gradient (first `k` columns).
fn add_feature_grad(dst: &mut [f64], input_grad: &Array2<f64>, k: usize) {
    let n = input_grad.nrows();
    for i in 0..n {
        for j in 0..k {
            dst[i * k + j] += input_grad[(i, j)];
        }
    }
}

/// Reverse pass from surfel gradients (and extra gradients on the morphed
/// vertices) to features and decoder weights.
pub fn scene_backward(
    avatar: &Avatar,
    ctx: &AvatarContext,
    decoded: &Decoded,
    scene: &Scene,
    surfel_grads: &SurfelGrads,
    vertex_grads: Option<&[Vec3]>,
    trainable: Trainable,
) -> Result<ParamGrads> {
    if surfel_grads.position.len() != scene.surfels.len() {
        return Err(Error::Usage("surfel gradients do not match the scene".into()));
    }
    let m = &avatar.model;
    let n_k = m.n_k;
    let k = avatar.features.k;
    let faces = &ctx.body.faces;
    let nf = faces.len();
    let verts = &scene.morphed.vertices;
    let mut g_frames = vec![FaceFrameGrad::default(); nf];
    let mut g_v: Vec<Vec3> = match vertex_grads {
        Some(g) => g.to_vec(),
        None => vec![Vec3::zeros(); verts.len()],
    };
    let mut g_colors = vec![[0.0; 3]; nf * n_k];
    let mut g_uvd = vec![[0.0; 3]; nf * n_k];
    let mut g_scales = vec![[0.0; 2]; nf * n_k];

    for i in 0..scene.n_coarse {
        let gf = &mut g_frames[i];
        gf.center += surfel_grads.position[i];
        gf.area_scale += surfel_grads.scale[i][0] + surfel_grads.scale[i][1];
        add_rotation_grad(gf, &surfel_grads.rotation_matrix[i]);
        let c = surfel_grads.color[i];
        for kk in 0..n_k {
            for ch in 0..3 {
                g_colors[i * n_k + kk][ch] += c[ch] / n_k as f64;
            }
        }
    }
    if scene.layers.fine() {
        let uvd = decoded.uvd.as_ref().expect("fine decoded");
        let scales = decoded.scales.as_ref().expect("scales decoded");
        for (fi, f) in faces.iter().enumerate() {
            let fr = &scene.frames[fi];
            let (va, vb, vc) = (verts[f[0]], verts[f[1]], verts[f[2]]);
            for kk in 0..n_k {
                let j = fi * n_k + kk;
                let i = scene.n_coarse + j;
                let gp = surfel_grads.position[i];
                let c = uvd[j];
                g_v[f[0]] += gp * c.u;
                g_v[f[1]] += gp * c.v;
                g_v[f[2]] += gp * (1.0 - c.u - c.v);
                let gf = &mut g_frames[fi];
                gf.normal += gp * c.d;
                g_uvd[j] = [gp.dot(&(va - vc)), gp.dot(&(vb - vc)), gp.dot(&fr.normal)];
                let gs = surfel_grads.scale[i];
                gf.area_scale += gs[0] * scales[j][0] + gs[1] * scales[j][1];
                g_scales[j] = [gs[0] * fr.area_scale, gs[1] * fr.area_scale];
                add_rotation_grad(gf, &surfel_grads.rotation_matrix[i]);
                let gc = surfel_grads.color[i];
                for ch in 0..3 {
                    g_colors[j][ch] += gc[ch];
                }
            }
        }
    }
    for (fi, f) in faces.iter().enumerate() {
        let g = face_frame_backward(&verts[f[0]], &verts[f[1]], &verts[f[2]], &g_frames[fi]);
        for c in 0..3 {
            g_v[f[c]] += g[c];
        }
    }

    let mut out = ParamGrads::zeros(avatar);
    let d = &avatar.decoders;

    // Geometry path: morphed vertices -> vertex offsets -> face offsets.
    if trainable.coarse || trainable.f_geo {
        let inc = &ctx.incidence;
        let dim = m.offset_mode.dim();
        let mut g_face = vec![0.0; nf * dim];
        for (v, gv) in g_v.iter().enumerate() {
            let fs = inc.of(v);
            let inv = 1.0 / fs.len() as f64;
            match &decoded.offsets {
                FaceOffsets::Normal(_) => {
                    if scene.clamped[v][0] {
                        continue;
                    }
                    let gs = scene.base().vertex_normals[v].dot(gv) * inv;
                    for &f in fs {
                        g_face[f] += gs;
                    }
                }
                FaceOffsets::Face(_) => {
                    let mut g = *gv;
                    for c in 0..3 {
                        if scene.clamped[v][c] {
                            g[c] = 0.0;
                        }
                    }
                    let rots = scene.base_rotations.as_ref().expect("face mode rotations");
                    for &f in fs {
                        let local = rots[f].transpose() * g * inv;
                        for c in 0..3 {
                            g_face[3 * f + c] += local[c];
                        }
                    }
                }
            }
        }
        let t = &decoded.coarse_tape;
        let g_raw = coarse_head_backward(t.raw.as_slice().expect("contiguous"), &g_face, m.max_offset);
        let g_raw = Array2::from_shape_vec((nf, dim), g_raw).expect("shape");
        let g_in = d.coarse.backward_batch(&t.tape, g_raw.view(), &mut out.coarse);
        if trainable.f_geo {
            add_feature_grad(&mut out.f_geo, &g_in, k);
        }
    }
    if scene.layers.fine() && (trainable.fine || trainable.f_geo) {
        let t = decoded.fine_tape.as_ref().expect("fine tape");
        let g_raw = fine_head_backward(t.raw.as_slice().expect("contiguous"), &g_uvd, m.max_d);
        let g_raw = Array2::from_shape_vec((nf, 3 * n_k), g_raw).expect("shape");
        let g_in = d.fine.backward_batch(&t.tape, g_raw.view(), &mut out.fine);
        if trainable.f_geo {
            add_feature_grad(&mut out.f_geo, &g_in, k);
        }
    }
    if trainable.color || trainable.f_tex {
        let t = decoded.color_tape.as_ref().expect("color tape");
        let g_raw = color_head_backward(t.raw.as_slice().expect("contiguous"), &g_colors);
        let g_raw = Array2::from_shape_vec((nf, 3 * n_k), g_raw).expect("shape");
        let g_in = d.color.backward_batch(&t.tape, g_raw.view(), &mut out.color);
        if trainable.f_tex {
            add_feature_grad(&mut out.f_tex, &g_in, k);
        }
    }
    if scene.layers.fine() && (trainable.scale || trainable.f_tex) {
        let t = decoded.scale_tape.as_ref().expect("scale tape");
        let g_raw = scale_head_backward(t.raw.as_slice().expect("contiguous"), &g_scales, m.max_scale_factor);
        let g_raw = Array2::from_shape_vec((nf, 2 * n_k), g_raw).expect("shape");
        let g_in = d.scale.backward_batch(&t.tape, g_raw.view(), &mut out.scale);
        if trainable.f_tex {
            add_feature_grad(&mut out.f_tex, &g_in, k);
        }
    }
    // Frozen tensors report exactly zero.
    let frozen = ParamGrads::zeros(avatar);
    if !trainable.coarse {
        out.coarse = frozen.coarse.clone();
    }
    if !trainable.fine {
        out.fine = frozen.fine.clone();
    }
    if !trainable.color {
        out.color = frozen.color.clone();
    }
    if !trainable.scale {
        out.scale = frozen.scale;
    }
    Ok(out)
}

/// Forward-only convenience: decode everything and place surfels.
pub fn avatar_scene(avatar: &Avatar, ctx: &AvatarContext, params: &BodyParams, layers: SurfelLayers) -> Result<Scene> {
    let decoded = decode(avatar, ctx, DecodeSet::for_layers(layers))?;
    build_scene(avatar, ctx, &decoded, params, layers)
}

/// Vertex displacements of a scene (morphed minus base).
pub fn displacement(scene: &Scene) -> Vec<Vec3> {
    scene.morphed.vertices.iter().zip(&scene.base().vertices).map(|(a, b)| a - b).collect()
}

/// Mean decoded fine color of each listed face.
pub fn face_mean_colors(avatar: &Avatar, ctx: &AvatarContext, faces: &[usize]) -> Result<Vec<[f64; 3]>> {
    let n = avatar.features.n_faces;
    let mut out = Vec::with_capacity(faces.len());
    for &f in faces {
        if f >= n {
            return Err(Error::Index { index: f, len: n });
        }
        let input: Vec<f64> = avatar.features.tex_row(f).iter().chain(ctx.encodings.slice(s![f, ..])).copied().collect();
        let (raw, _) = crate::decoders::mlp_forward(&avatar.decoders.color, &input)?;
        out.push(crate::decoders::coarse_color(&color_head(&raw)));
    }
    Ok(out)
}
