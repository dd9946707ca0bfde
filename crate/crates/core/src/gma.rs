//! The layered avatar representation: per-face feature vectors, the morphed
//! mesh (base mesh pushed along vertex normals) and the rules that place
//! coarse and fine surfels on its faces.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::body::{face_frame, face_frames, FaceFrame, MeshState, SkinnedBody};
use crate::error::{Error, Result};
use crate::geom::Vec3;

/// How the coarse decoder output displaces the mesh.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OffsetMode {
    /// One scalar per face, averaged onto vertices and applied along vertex
    /// normals.
    #[default]
    Normal,
    /// One free 3D vector per face, averaged onto vertices.
    Face,
}

impl OffsetMode {
    pub fn dim(self) -> usize {
        match self {
            OffsetMode::Normal => 1,
            OffsetMode::Face => 3,
        }
    }
}

/// Fixed hyper-parameters of an avatar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Feature dimension.
    pub k: usize,
    /// Fine surfels per face.
    pub n_k: usize,
    /// Positional-encoding frequencies.
    pub n_freq: usize,
    /// Bound on vertex offsets (meters).
    pub max_offset: f64,
    /// Bound on the fine-surfel normal offset `d` (meters).
    pub max_d: f64,
    /// Upper bound of the decoded scale factor; the lower bound is its
    /// reciprocal.
    pub max_scale_factor: f64,
    pub offset_mode: OffsetMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 16,
            n_k: 6,
            n_freq: 4,
            max_offset: 0.15,
            max_d: 0.05,
            max_scale_factor: 4.0,
            offset_mode: OffsetMode::Normal,
        }
    }
}

impl ModelConfig {
    pub fn decoder_input_dim(&self) -> usize {
        self.k + 6 * self.n_freq
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n_k == 0 || self.n_freq == 0 {
            return Err(Error::Config("k, n_k and n_freq must be positive".into()));
        }
        if !(self.max_offset > 0.0 && self.max_d > 0.0 && self.max_scale_factor > 1.0) {
            return Err(Error::Config(
                "max_offset and max_d must be positive, max_scale_factor > 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-face geometry and texture features, row-major `n_faces x k`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureLayer {
    pub n_faces: usize,
    pub k: usize,
    pub geo: Vec<f64>,
    pub tex: Vec<f64>,
}

impl FeatureLayer {
    pub fn geo_row(&self, face: usize) -> &[f64] {
        &self.geo[face * self.k..(face + 1) * self.k]
    }

    pub fn tex_row(&self, face: usize) -> &[f64] {
        &self.tex[face * self.k..(face + 1) * self.k]
    }

    pub fn tex_row_mut(&mut self, face: usize) -> &mut [f64] {
        &mut self.tex[face * self.k..(face + 1) * self.k]
    }

    pub fn geo_row_mut(&mut self, face: usize) -> &mut [f64] {
        &mut self.geo[face * self.k..(face + 1) * self.k]
    }
}

/// Features drawn i.i.d. from N(0, 0.01^2), deterministic in `seed`.
pub fn init_feature_layer(n_faces: usize, k: usize, seed: u64) -> Result<FeatureLayer> {
    if n_faces == 0 || k == 0 {
        return Err(Error::Precondition(format!(
            "feature layer needs n_faces > 0 and k > 0, got {n_faces} x {k}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.01).expect("valid std");
    let geo = (0..n_faces * k).map(|_| normal.sample(&mut rng)).collect();
    let tex = (0..n_faces * k).map(|_| normal.sample(&mut rng)).collect();
    Ok(FeatureLayer { n_faces, k, geo, tex })
}

/// Vertex-to-face incidence in compressed form.
#[derive(Clone, Debug)]
pub struct Incidence {
    offsets: Vec<usize>,
    faces: Vec<usize>,
}

impl Incidence {
    pub fn new(n_vertices: usize, faces: &[[usize; 3]]) -> Self {
        let mut count = vec![0usize; n_vertices + 1];
        for f in faces {
            for &v in f {
                count[v + 1] += 1;
            }
        }
        for i in 0..n_vertices {
            count[i + 1] += count[i];
        }
        let mut fill = count.clone();
        let mut out = vec![0; count[n_vertices]];
        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                out[fill[v]] = fi;
                fill[v] += 1;
            }
        }
        Self { offsets: count, faces: out }
    }

    pub fn of(&self, vertex: usize) -> &[usize] {
        &self.faces[self.offsets[vertex]..self.offsets[vertex + 1]]
    }

    pub fn n_vertices(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn check_connected(&self) -> Result<()> {
        match (0..self.n_vertices()).find(|&v| self.of(v).is_empty()) {
            Some(v) => Err(Error::Topology(format!("vertex {v} has no incident face"))),
            None => Ok(()),
        }
    }
}

/// Vertex offset scales: the mean of the incident faces' offsets, clamped to
/// `[-max_offset, max_offset]`.
pub fn face_offsets_to_vertex_scales(
    face_offsets: &[f64],
    body: &SkinnedBody,
    max_offset: f64,
) -> Result<Vec<f64>> {
    let inc = Incidence::new(body.n_vertices(), &body.faces);
    vertex_scales_from_faces(face_offsets, &inc, max_offset)
}

pub fn vertex_scales_from_faces(face_offsets: &[f64], inc: &Incidence, max_offset: f64) -> Result<Vec<f64>> {
    inc.check_connected()?;
    if let Some(i) = face_offsets.iter().position(|v| !v.is_finite()) {
        return Err(Error::Precondition(format!("face offset {i} is not finite")));
    }
    Ok((0..inc.n_vertices())
        .map(|v| {
            let fs = inc.of(v);
            let mean = fs.iter().map(|&f| face_offsets[f]).sum::<f64>() / fs.len() as f64;
            mean.clamp(-max_offset, max_offset)
        })
        .collect())
}

/// Free-offset variant: per-vertex mean of incident face vectors, clamped
/// per component.
pub fn vertex_vectors_from_faces(face_offsets: &[Vec3], inc: &Incidence, max_offset: f64) -> Result<Vec<Vec3>> {
    inc.check_connected()?;
    Ok((0..inc.n_vertices())
        .map(|v| {
            let fs = inc.of(v);
            let mean = fs.iter().map(|&f| face_offsets[f]).sum::<Vec3>() / fs.len() as f64;
            mean.map(|c| c.clamp(-max_offset, max_offset))
        })
        .collect())
}

/// Per-vertex displacement of a morphed mesh.
#[derive(Clone, Debug, PartialEq)]
pub enum VertexOffsets {
    /// Signed scale along the base vertex normal.
    Normal(Vec<f64>),
    /// Free displacement vector.
    Free(Vec<Vec3>),
}

#[derive(Clone, Debug)]
pub struct MorphedMesh {
    pub base: MeshState,
    pub offsets: VertexOffsets,
    pub vertices: Vec<Vec3>,
}

/// `V'_k = V_k + O_k * N_k`.
pub fn morph_mesh(base: &MeshState, scales: &[f64]) -> Result<MorphedMesh> {
    if scales.len() != base.vertices.len() {
        return Err(Error::Shape(format!(
            "expected {} vertex scales, got {}",
            base.vertices.len(),
            scales.len()
        )));
    }
    let vertices = base
        .vertices
        .iter()
        .zip(&base.vertex_normals)
        .zip(scales)
        .map(|((v, n), s)| v + n * *s)
        .collect();
    Ok(MorphedMesh {
        base: base.clone(),
        offsets: VertexOffsets::Normal(scales.to_vec()),
        vertices,
    })
}

pub fn morph_mesh_free(base: &MeshState, offsets: &[Vec3]) -> Result<MorphedMesh> {
    if offsets.len() != base.vertices.len() {
        return Err(Error::Shape(format!(
            "expected {} vertex offsets, got {}",
            base.vertices.len(),
            offsets.len()
        )));
    }
    let vertices = base.vertices.iter().zip(offsets).map(|(v, o)| v + o).collect();
    Ok(MorphedMesh {
        base: base.clone(),
        offsets: VertexOffsets::Free(offsets.to_vec()),
        vertices,
    })
}

impl MorphedMesh {
    pub fn frames(&self, faces: &[[usize; 3]]) -> Result<Vec<FaceFrame>> {
        face_frames(&self.vertices, faces)
    }

    pub fn as_mesh_state(&self, faces: &[[usize; 3]]) -> MeshState {
        MeshState {
            vertex_normals: crate::body::vertex_normals(&self.vertices, faces),
            vertices: self.vertices.clone(),
        }
    }
}

/// An oriented 2D Gaussian disk with opacity 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Surfel {
    pub position: Vec3,
    /// In-plane standard deviations along the local x and y axes (meters).
    pub scale: [f64; 2],
    /// `[w, x, y, z]` rotation from the local frame to world.
    pub rotation: [f64; 4],
    pub color: [f64; 3],
    /// Face the surfel is anchored to; reported by the ID pass.
    pub face: usize,
}

pub type SurfelSet = Vec<Surfel>;

/// Barycentric `(u, v)` plus signed normal offset `d`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UvdCoord {
    pub u: f64,
    pub v: f64,
    pub d: f64,
}

impl UvdCoord {
    pub fn is_valid(&self, max_d: f64) -> bool {
        self.u >= 0.0 && self.v >= 0.0 && self.u + self.v <= 1.0 + 1e-12 && self.d.abs() <= max_d
    }
}

/// One surfel per face at the morphed face center, scale `(s_f, s_f)` and
/// the face rotation.
pub fn embed_coarse(morphed: &MorphedMesh, faces: &[[usize; 3]], colors: &[[f64; 3]]) -> Result<SurfelSet> {
    if colors.len() != faces.len() {
        return Err(Error::Shape(format!("expected {} colors, got {}", faces.len(), colors.len())));
    }
    let frames = morphed.frames(faces)?;
    Ok(frames
        .iter()
        .zip(colors)
        .enumerate()
        .map(|(fi, (fr, c))| Surfel {
            position: fr.center,
            scale: [fr.area_scale, fr.area_scale],
            rotation: fr.rotation,
            color: *c,
            face: fi,
        })
        .collect())
}

/// Position of a fine surfel on a triangle: `u V1 + v V2 + (1-u-v) V3 + N d`.
pub fn uvd_position(v: &[Vec3; 3], normal: &Vec3, c: &UvdCoord) -> Vec3 {
    v[0] * c.u + v[1] * c.v + v[2] * (1.0 - c.u - c.v) + normal * c.d
}

/// Fine surfels on one morphed face.
pub fn embed_fine(
    morphed: &MorphedMesh,
    faces: &[[usize; 3]],
    face_index: usize,
    coords: &[UvdCoord],
    scales2d: &[[f64; 2]],
    colors: &[[f64; 3]],
) -> Result<SurfelSet> {
    let f = faces.get(face_index).ok_or(Error::Index {
        index: face_index,
        len: faces.len(),
    })?;
    if coords.len() != scales2d.len() || coords.len() != colors.len() {
        return Err(Error::Shape(format!(
            "coords/scales/colors lengths differ: {}/{}/{}",
            coords.len(),
            scales2d.len(),
            colors.len()
        )));
    }
    let v = [morphed.vertices[f[0]], morphed.vertices[f[1]], morphed.vertices[f[2]]];
    let fr = face_frame(&v[0], &v[1], &v[2]).ok_or(Error::DegenerateFace { face: face_index })?;
    Ok(coords
        .iter()
        .zip(scales2d)
        .zip(colors)
        .map(|((c, s), col)| Surfel {
            position: uvd_position(&v, &fr.normal, c),
            scale: [fr.area_scale * s[0], fr.area_scale * s[1]],
            rotation: fr.rotation,
            color: *col,
            face: face_index,
        })
        .collect())
}

/// Sinusoidal encoding: for each frequency `l`, `sin(2^l pi p)` for the
/// three coordinates followed by `cos(2^l pi p)`.
pub fn encode_position(p: &Vec3, n_freq: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(6 * n_freq);
    for l in 0..n_freq {
        let f = (1u64 << l) as f64 * std::f64::consts::PI;
        for c in 0..3 {
            out.push((f * p[c]).sin());
        }
        for c in 0..3 {
            out.push((f * p[c]).cos());
        }
    }
    out
}
