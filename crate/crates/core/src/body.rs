//! Procedural parametric body.
//!
//! The body is a set of closed capsules (torso, head, upper/lower arms and
//! legs) driven by a small joint tree. It exposes the usual parametric
//! interface `S(beta, theta, psi)`:
//!
//! * `beta`: linear shape blendshapes. Component 0 scales height, 1 girth,
//!   2 limb length; further components add smooth radial bulges.
//! * `theta`: one axis-angle rotation per joint, applied with linear blend
//!   skinning around the (shaped) rest joints. Joint 0 is the root and its
//!   rotation is the global orientation.
//! * `psi`: expression blendshapes supported on the head only.
//!
//! Coordinates are meters, `+y` up, the subject faces `+z`, pelvis at the
//! origin.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{axis_angle_to_matrix, matrix_to_quat, Mat3, Vec3};

/// Resolution and basis dimensions of the procedural body.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BodyConfig {
    pub limb_segments: u32,
    pub limb_rings: u32,
    pub torso_segments: u32,
    pub torso_rings: u32,
    pub head_segments: u32,
    pub head_rings: u32,
    /// Number of shape coefficients (B).
    pub n_shape: usize,
    /// Number of expression coefficients (E).
    pub n_expr: usize,
    /// Joint count: 5 (minimal skeleton) or 13 (standard skeleton).
    pub n_joints: usize,
}

impl Default for BodyConfig {
    fn default() -> Self {
        Self {
            limb_segments: 8,
            limb_rings: 5,
            torso_segments: 12,
            torso_rings: 10,
            head_segments: 10,
            head_rings: 7,
            n_shape: 4,
            n_expr: 2,
            n_joints: 13,
        }
    }
}

impl BodyConfig {
    pub fn validate(&self) -> Result<()> {
        let res = [
            ("limb_segments", self.limb_segments, 3),
            ("limb_rings", self.limb_rings, 1),
            ("torso_segments", self.torso_segments, 3),
            ("torso_rings", self.torso_rings, 1),
            ("head_segments", self.head_segments, 3),
            ("head_rings", self.head_rings, 1),
        ];
        for (name, value, min) in res {
            if value < min {
                return Err(Error::Config(format!("{name} must be >= {min}, got {value}")));
            }
        }
        if self.n_shape < 3 {
            return Err(Error::Config(format!("n_shape must be >= 3, got {}", self.n_shape)));
        }
        if self.n_expr < 1 {
            return Err(Error::Config(format!("n_expr must be >= 1, got {}", self.n_expr)));
        }
        if self.n_joints != 5 && self.n_joints != 13 {
            return Err(Error::Config(format!(
                "n_joints must be 5 or 13, got {}",
                self.n_joints
            )));
        }
        Ok(())
    }
}

/// Shape, pose and expression coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyParams {
    pub beta: Vec<f64>,
    /// Axis-angle per joint, flattened `J * 3`.
    pub theta: Vec<f64>,
    pub psi: Vec<f64>,
}

impl BodyParams {
    pub fn zeros(n_shape: usize, n_joints: usize, n_expr: usize) -> Self {
        Self {
            beta: vec![0.0; n_shape],
            theta: vec![0.0; n_joints * 3],
            psi: vec![0.0; n_expr],
        }
    }

    pub fn joint_rotation(&self, j: usize) -> Vec3 {
        Vec3::new(self.theta[3 * j], self.theta[3 * j + 1], self.theta[3 * j + 2])
    }

    pub fn set_joint_rotation(&mut self, j: usize, aa: Vec3) {
        self.theta[3 * j..3 * j + 3].copy_from_slice(aa.as_slice());
    }

    pub fn is_finite(&self) -> bool {
        self.beta.iter().chain(&self.theta).chain(&self.psi).all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PartKind {
    Torso,
    Head,
    UpperArm,
    LowerArm,
    UpperLeg,
    LowerLeg,
}

#[derive(Clone, Debug)]
pub struct BodyPart {
    pub name: &'static str,
    pub kind: PartKind,
    /// +1 for the subject's left, -1 for right, 0 for center parts.
    pub side: i8,
    pub start: Vec3,
    pub end: Vec3,
    pub segments: usize,
    pub rings: usize,
}

/// Grid location of a face on its part: ring band (0 and `rings` are the
/// caps) and segment index around the axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FaceCell {
    pub part: usize,
    pub band: usize,
    pub segment: usize,
}

/// The skinned template with its blendshape bases.
#[derive(Clone, Debug)]
pub struct SkinnedBody {
    pub config: BodyConfig,
    pub template_vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    /// `n_shape` bases, each `N_v` displacements.
    pub shape_basis: Vec<Vec<Vec3>>,
    /// Joint displacement per shape coefficient, `n_shape` x `J`.
    pub joint_shape_basis: Vec<Vec<Vec3>>,
    pub expr_basis: Vec<Vec<Vec3>>,
    pub joints: Vec<Vec3>,
    pub parents: Vec<Option<usize>>,
    /// Row-major `N_v x J`.
    pub skin_weights: Vec<f64>,
    pub parts: Vec<BodyPart>,
    pub vertex_part: Vec<usize>,
    pub face_cells: Vec<FaceCell>,
}

/// Posed vertex positions plus unit vertex normals.
#[derive(Clone, Debug, PartialEq)]
pub struct MeshState {
    pub vertices: Vec<Vec3>,
    pub vertex_normals: Vec<Vec3>,
}

/// Local frame of a triangle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaceFrame {
    pub center: Vec3,
    pub normal: Vec3,
    pub tangent: Vec3,
    pub bitangent: Vec3,
    /// Maps local (tangent, bitangent, normal) to world; `[w, x, y, z]`, `w >= 0`.
    pub rotation: [f64; 4],
    /// `sqrt(area)`.
    pub area_scale: f64,
}

impl FaceFrame {
    pub fn rotation_matrix(&self) -> Mat3 {
        Mat3::from_columns(&[self.tangent, self.bitangent, self.normal])
    }
}

/// Gradient w.r.t. a [`FaceFrame`]'s differentiable outputs.
#[derive(Clone, Copy, Debug, Default)]
pub struct FaceFrameGrad {
    pub center: Vec3,
    pub normal: Vec3,
    pub tangent: Vec3,
    pub bitangent: Vec3,
    pub area_scale: f64,
}

struct Skeleton {
    joints: Vec<Vec3>,
    parents: Vec<Option<usize>>,
}

enum Binding {
    /// Piecewise-linear blend along `y` between joints at given heights.
    Heights(Vec<(usize, f64)>),
    /// Bound to `own`, blended half-way into `parent` at the part start and
    /// into `child` at the part end.
    Chain {
        parent: Option<usize>,
        own: usize,
        child: Option<usize>,
    },
}

const ARM_ANGLE: f64 = 50.0 * std::f64::consts::PI / 180.0;

fn arm_dir(side: f64) -> Vec3 {
    Vec3::new(side * ARM_ANGLE.sin(), -ARM_ANGLE.cos(), 0.0)
}

fn shoulder(side: f64) -> Vec3 {
    Vec3::new(side * 0.19, 0.42, 0.0)
}

fn hip(side: f64) -> Vec3 {
    Vec3::new(side * 0.09, -0.06, 0.0)
}

const UPPER_ARM_LEN: f64 = 0.28;
const LOWER_ARM_LEN: f64 = 0.26;
const UPPER_LEG_LEN: f64 = 0.42;
const LOWER_LEG_LEN: f64 = 0.42;

fn part_radii(kind: PartKind) -> (f64, f64) {
    match kind {
        PartKind::Torso => (0.16, 0.11),
        PartKind::Head => (0.095, 0.105),
        PartKind::UpperArm => (0.05, 0.05),
        PartKind::LowerArm => (0.04, 0.04),
        PartKind::UpperLeg => (0.075, 0.075),
        PartKind::LowerLeg => (0.055, 0.055),
    }
}

fn skeleton(n_joints: usize) -> Skeleton {
    let l = 1.0;
    let r = -1.0;
    if n_joints == 5 {
        return Skeleton {
            joints: vec![
                Vec3::zeros(),
                Vec3::new(0.0, 0.32, 0.0),
                Vec3::new(0.0, 0.56, 0.0),
                shoulder(l),
                shoulder(r),
            ],
            parents: vec![None, Some(0), Some(1), Some(1), Some(1)],
        };
    }
    Skeleton {
        joints: vec![
            Vec3::zeros(),                                  // 0 pelvis
            Vec3::new(0.0, 0.15, 0.0),                      // 1 spine
            Vec3::new(0.0, 0.32, 0.0),                      // 2 chest
            Vec3::new(0.0, 0.50, 0.0),                      // 3 neck
            Vec3::new(0.0, 0.58, 0.0),                      // 4 head
            shoulder(l),                                    // 5 left shoulder
            shoulder(l) + arm_dir(l) * UPPER_ARM_LEN,       // 6 left elbow
            shoulder(r),                                    // 7 right shoulder
            shoulder(r) + arm_dir(r) * UPPER_ARM_LEN,       // 8 right elbow
            hip(l),                                         // 9 left hip
            hip(l) + Vec3::new(0.0, -UPPER_LEG_LEN, 0.0),   // 10 left knee
            hip(r),                                         // 11 right hip
            hip(r) + Vec3::new(0.0, -UPPER_LEG_LEN, 0.0),   // 12 right knee
        ],
        parents: vec![
            None,
            Some(0),
            Some(1),
            Some(2),
            Some(3),
            Some(2),
            Some(5),
            Some(2),
            Some(7),
            Some(0),
            Some(9),
            Some(0),
            Some(11),
        ],
    }
}

fn parts_and_bindings(config: &BodyConfig) -> Vec<(BodyPart, Binding)> {
    let ls = config.limb_segments as usize;
    let lr = config.limb_rings as usize;
    let standard = config.n_joints == 13;
    let mut out = Vec::new();
    out.push((
        BodyPart {
            name: "torso",
            kind: PartKind::Torso,
            side: 0,
            start: Vec3::new(0.0, -0.16, 0.0),
            end: Vec3::new(0.0, 0.52, 0.0),
            segments: config.torso_segments as usize,
            rings: config.torso_rings as usize,
        },
        if standard {
            Binding::Heights(vec![(0, 0.0), (1, 0.15), (2, 0.32), (3, 0.50)])
        } else {
            Binding::Heights(vec![(0, 0.0), (1, 0.32)])
        },
    ));
    out.push((
        BodyPart {
            name: "head",
            kind: PartKind::Head,
            side: 0,
            start: Vec3::new(0.0, 0.53, 0.0),
            end: Vec3::new(0.0, 0.79, 0.0),
            segments: config.head_segments as usize,
            rings: config.head_rings as usize,
        },
        if standard {
            Binding::Chain { parent: Some(3), own: 4, child: None }
        } else {
            Binding::Chain { parent: Some(1), own: 2, child: None }
        },
    ));
    for (side, name_u, name_l) in [(1i8, "left_upper_arm", "left_lower_arm"), (-1, "right_upper_arm", "right_lower_arm")] {
        let s = side as f64;
        let sh = shoulder(s);
        let el = sh + arm_dir(s) * UPPER_ARM_LEN;
        let wr = el + arm_dir(s) * LOWER_ARM_LEN;
        let (j_sh, j_el) = if side > 0 { (5, 6) } else { (7, 8) };
        let (up, low) = if standard {
            (
                Binding::Chain { parent: Some(2), own: j_sh, child: Some(j_el) },
                Binding::Chain { parent: Some(j_sh), own: j_el, child: None },
            )
        } else {
            let j = if side > 0 { 3 } else { 4 };
            (
                Binding::Chain { parent: Some(1), own: j, child: None },
                Binding::Chain { parent: None, own: j, child: None },
            )
        };
        out.push((
            BodyPart { name: name_u, kind: PartKind::UpperArm, side, start: sh, end: el, segments: ls, rings: lr },
            up,
        ));
        out.push((
            BodyPart { name: name_l, kind: PartKind::LowerArm, side, start: el, end: wr, segments: ls, rings: lr },
            low,
        ));
    }
    for (side, name_u, name_l) in [(1i8, "left_upper_leg", "left_lower_leg"), (-1, "right_upper_leg", "right_lower_leg")] {
        let s = side as f64;
        let hp = hip(s);
        let kn = hp + Vec3::new(0.0, -UPPER_LEG_LEN, 0.0);
        let an = kn + Vec3::new(0.0, -LOWER_LEG_LEN, 0.0);
        let (j_hip, j_knee) = if side > 0 { (9, 10) } else { (11, 12) };
        let (up, low) = if standard {
            (
                Binding::Chain { parent: Some(0), own: j_hip, child: Some(j_knee) },
                Binding::Chain { parent: Some(j_hip), own: j_knee, child: None },
            )
        } else {
            (
                Binding::Chain { parent: None, own: 0, child: None },
                Binding::Chain { parent: None, own: 0, child: None },
            )
        };
        out.push((
            BodyPart { name: name_u, kind: PartKind::UpperLeg, side, start: hp, end: kn, segments: ls, rings: lr },
            up,
        ));
        out.push((
            BodyPart { name: name_l, kind: PartKind::LowerLeg, side, start: kn, end: an, segments: ls, rings: lr },
            low,
        ));
    }
    out
}

/// Orthonormal cross-section axes for a part axis `d`.
fn cross_section_axes(d: &Vec3) -> (Vec3, Vec3) {
    let helper = if d.z.abs() < 0.9 { Vec3::z() } else { Vec3::x() };
    let e1 = helper.cross(d).normalize();
    let e2 = d.cross(&e1);
    (e1, e2)
}

/// Capsule profile: maps ring index to (axial distance, radial factor).
fn capsule_profile(length: f64, radius: f64, ring: usize, rings: usize) -> (f64, f64) {
    let radius = radius.min(length * 0.5);
    let cap = std::f64::consts::FRAC_PI_2 * radius;
    let straight = length - 2.0 * radius;
    let total = 2.0 * cap + straight;
    let s = total * ring as f64 / (rings + 1) as f64;
    if s < cap {
        let phi = s / radius;
        (radius * (1.0 - phi.cos()), phi.sin())
    } else if s <= cap + straight {
        (radius + (s - cap), 1.0)
    } else {
        let phi = (s - cap - straight) / radius;
        (length - radius + radius * phi.sin(), phi.cos())
    }
}

fn chain_weights(binding: &Binding, pos: &Vec3, s: f64, n_joints: usize) -> Vec<f64> {
    let mut w = vec![0.0; n_joints];
    match binding {
        Binding::Heights(ctrl) => {
            let y = pos.y;
            if y <= ctrl[0].1 {
                w[ctrl[0].0] = 1.0;
            } else if y >= ctrl[ctrl.len() - 1].1 {
                w[ctrl[ctrl.len() - 1].0] = 1.0;
            } else {
                for pair in ctrl.windows(2) {
                    let (ja, ya) = pair[0];
                    let (jb, yb) = pair[1];
                    if y >= ya && y < yb {
                        let t = (y - ya) / (yb - ya);
                        w[jb] = t;
                        w[ja] = 1.0 - t;
                        break;
                    }
                }
            }
        }
        Binding::Chain { parent, own, child } => {
            const BLEND: f64 = 0.2;
            let mut own_w = 1.0;
            if let Some(p) = parent {
                if s < BLEND {
                    let pw = 0.5 * (1.0 - s / BLEND);
                    w[*p] += pw;
                    own_w -= pw;
                }
            }
            if let Some(c) = child {
                if s > 1.0 - BLEND {
                    let cw = 0.5 * (s - (1.0 - BLEND)) / BLEND;
                    w[*c] += cw;
                    own_w -= cw;
                }
            }
            w[*own] += own_w;
        }
    }
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

fn shape_delta(b: usize, p: &Vec3, part: Option<&BodyPart>, limb_root: Option<(Vec3, Vec3)>) -> Vec3 {
    let radial = |part: &BodyPart| {
        let d = (part.end - part.start).normalize();
        let rel = p - part.start;
        rel - d * rel.dot(&d)
    };
    match b {
        0 => Vec3::new(0.0, 0.1 * p.y, 0.0),
        1 => match part {
            Some(part) => {
                let scale = if part.kind == PartKind::Head { 0.1 } else { 0.3 };
                radial(part) * scale
            }
            None => Vec3::zeros(),
        },
        2 => match limb_root {
            Some((root, dir)) => dir * (0.15 * (p - root).dot(&dir)),
            None => Vec3::zeros(),
        },
        _ => match part {
            Some(part) => {
                let r = radial(part);
                let n = r.norm();
                if n == 0.0 {
                    Vec3::zeros()
                } else {
                    let k = (b - 2) as f64;
                    r / n * (0.02 * (std::f64::consts::PI * k * (p.y + 1.0)).sin())
                }
            }
            None => Vec3::zeros(),
        },
    }
}

fn expr_delta(e: usize, p: &Vec3, head: &BodyPart) -> Vec3 {
    let center = (head.start + head.end) * 0.5;
    let q = p - center;
    let r = 0.1;
    match e {
        0 => {
            let w = (q.z / r).max(0.0) * (-q.y / r).max(0.0);
            Vec3::new(0.0, -0.5, 1.0) * (0.04 * w)
        }
        1 => {
            let w = (q.z / r).max(0.0);
            Vec3::new(q.x / r, 0.0, 0.0) * (0.03 * w)
        }
        _ => {
            let ang = q.x.atan2(q.z);
            let radial = Vec3::new(q.x, 0.0, q.z);
            let n = radial.norm();
            if n == 0.0 {
                Vec3::zeros()
            } else {
                radial / n * (0.01 * (e as f64 * ang).sin())
            }
        }
    }
}

fn limb_root(part: &BodyPart) -> Option<(Vec3, Vec3)> {
    let s = part.side as f64;
    match part.kind {
        PartKind::UpperArm | PartKind::LowerArm => Some((shoulder(s), arm_dir(s))),
        PartKind::UpperLeg | PartKind::LowerLeg => Some((hip(s), Vec3::new(0.0, -1.0, 0.0))),
        _ => None,
    }
}

/// Build the closed, skinned procedural body.
pub fn build_procedural_body(config: &BodyConfig) -> Result<SkinnedBody> {
    config.validate()?;
    let skel = skeleton(config.n_joints);
    let n_joints = skel.joints.len();
    let parts_b = parts_and_bindings(config);

    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    let mut weights = Vec::new();
    let mut vertex_part = Vec::new();
    let mut face_cells = Vec::new();
    let mut parts = Vec::new();

    for (pi, (part, binding)) in parts_b.into_iter().enumerate() {
        let axis = part.end - part.start;
        let length = axis.norm();
        let d = axis / length;
        let (e1, e2) = cross_section_axes(&d);
        let (r1, r2) = part_radii(part.kind);
        let r_profile = 0.5 * (r1 + r2);
        let base = vertices.len();
        let mut push = |p: Vec3, s: f64, vertices: &mut Vec<Vec3>, weights: &mut Vec<f64>| {
            vertices.push(p);
            weights.extend(chain_weights(&binding, &p, s, n_joints));
            vertex_part.push(pi);
        };
        push(part.start, 0.0, &mut vertices, &mut weights);
        for ring in 1..=part.rings {
            let (axial, rf) = capsule_profile(length, r_profile, ring, part.rings);
            for seg in 0..part.segments {
                let a = 2.0 * std::f64::consts::PI * seg as f64 / part.segments as f64;
                let p = part.start + d * axial + (e1 * (r1 * a.cos()) + e2 * (r2 * a.sin())) * rf;
                push(p, axial / length, &mut vertices, &mut weights);
            }
        }
        push(part.end, 1.0, &mut vertices, &mut weights);

        let n_seg = part.segments;
        let ring_v = |ring: usize, seg: usize| base + 1 + (ring - 1) * n_seg + (seg % n_seg);
        let pole_a = base;
        let pole_b = base + 1 + part.rings * n_seg;
        for seg in 0..n_seg {
            faces.push([pole_a, ring_v(1, seg + 1), ring_v(1, seg)]);
            face_cells.push(FaceCell { part: pi, band: 0, segment: seg });
        }
        for ring in 1..part.rings {
            for seg in 0..n_seg {
                faces.push([ring_v(ring, seg), ring_v(ring, seg + 1), ring_v(ring + 1, seg)]);
                face_cells.push(FaceCell { part: pi, band: ring, segment: 2 * seg });
                faces.push([ring_v(ring, seg + 1), ring_v(ring + 1, seg + 1), ring_v(ring + 1, seg)]);
                face_cells.push(FaceCell { part: pi, band: ring, segment: 2 * seg + 1 });
            }
        }
        for seg in 0..n_seg {
            faces.push([pole_b, ring_v(part.rings, seg), ring_v(part.rings, seg + 1)]);
            face_cells.push(FaceCell { part: pi, band: part.rings, segment: seg });
        }
        parts.push(part);
    }

    let shape_basis = (0..config.n_shape)
        .map(|b| {
            vertices
                .iter()
                .zip(&vertex_part)
                .map(|(p, &pi)| shape_delta(b, p, Some(&parts[pi]), limb_root(&parts[pi])))
                .collect()
        })
        .collect();
    let joint_limb_root = |j: usize| -> Option<(Vec3, Vec3)> {
        if config.n_joints != 13 {
            return None;
        }
        match j {
            5 | 6 => Some((shoulder(1.0), arm_dir(1.0))),
            7 | 8 => Some((shoulder(-1.0), arm_dir(-1.0))),
            9 | 10 => Some((hip(1.0), Vec3::new(0.0, -1.0, 0.0))),
            11 | 12 => Some((hip(-1.0), Vec3::new(0.0, -1.0, 0.0))),
            _ => None,
        }
    };
    let joint_shape_basis = (0..config.n_shape)
        .map(|b| {
            skel.joints
                .iter()
                .enumerate()
                .map(|(j, p)| shape_delta(b, p, None, joint_limb_root(j)))
                .collect()
        })
        .collect();
    let head = parts.iter().find(|p| p.kind == PartKind::Head).expect("head part").clone();
    let expr_basis = (0..config.n_expr)
        .map(|e| {
            vertices
                .iter()
                .zip(&vertex_part)
                .map(|(p, &pi)| {
                    if parts[pi].kind == PartKind::Head {
                        expr_delta(e, p, &head)
                    } else {
                        Vec3::zeros()
                    }
                })
                .collect()
        })
        .collect();

    let body = SkinnedBody {
        config: config.clone(),
        template_vertices: vertices,
        faces,
        shape_basis,
        joint_shape_basis,
        expr_basis,
        joints: skel.joints,
        parents: skel.parents,
        skin_weights: weights,
        parts,
        vertex_part,
        face_cells,
    };
    // Template faces must be usable as embedding frames.
    face_frames(&body.template_vertices, &body.faces)?;
    Ok(body)
}

impl SkinnedBody {
    pub fn n_vertices(&self) -> usize {
        self.template_vertices.len()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn n_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn zero_params(&self) -> BodyParams {
        BodyParams::zeros(self.config.n_shape, self.n_joints(), self.config.n_expr)
    }

    pub fn check_params(&self, params: &BodyParams) -> Result<()> {
        if params.beta.len() != self.config.n_shape
            || params.theta.len() != 3 * self.n_joints()
            || params.psi.len() != self.config.n_expr
        {
            return Err(Error::Params(format!(
                "expected beta[{}], theta[{}], psi[{}]; got beta[{}], theta[{}], psi[{}]",
                self.config.n_shape,
                3 * self.n_joints(),
                self.config.n_expr,
                params.beta.len(),
                params.theta.len(),
                params.psi.len()
            )));
        }
        if !params.is_finite() {
            return Err(Error::Params("non-finite body parameter".into()));
        }
        Ok(())
    }

    /// Template plus shape and expression blendshapes, before skinning.
    pub fn shaped_vertices(&self, params: &BodyParams) -> Vec<Vec3> {
        let mut out = self.template_vertices.clone();
        for (coef, basis) in params.beta.iter().zip(&self.shape_basis) {
            if *coef != 0.0 {
                for (v, d) in out.iter_mut().zip(basis) {
                    *v += d * *coef;
                }
            }
        }
        for (coef, basis) in params.psi.iter().zip(&self.expr_basis) {
            if *coef != 0.0 {
                for (v, d) in out.iter_mut().zip(basis) {
                    *v += d * *coef;
                }
            }
        }
        out
    }

    pub fn shaped_joints(&self, params: &BodyParams) -> Vec<Vec3> {
        let mut out = self.joints.clone();
        for (coef, basis) in params.beta.iter().zip(&self.joint_shape_basis) {
            if *coef != 0.0 {
                for (v, d) in out.iter_mut().zip(basis) {
                    *v += d * *coef;
                }
            }
        }
        out
    }

    /// For every vertex, the faces touching it.
    pub fn vertex_faces(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_vertices()];
        for (fi, f) in self.faces.iter().enumerate() {
            for &v in f {
                out[v].push(fi);
            }
        }
        out
    }

    /// Unique undirected edges `(a, b)` with `a < b`, sorted.
    pub fn edges(&self) -> Vec<[usize; 2]> {
        unique_edges(&self.faces)
    }

    pub fn canonical_mesh(&self) -> MeshState {
        let verts = self.template_vertices.clone();
        let normals = vertex_normals(&verts, &self.faces);
        MeshState { vertices: verts, vertex_normals: normals }
    }
}

pub fn unique_edges(faces: &[[usize; 3]]) -> Vec<[usize; 2]> {
    let mut edges: Vec<[usize; 2]> = faces
        .iter()
        .flat_map(|f| [[f[0], f[1]], [f[1], f[2]], [f[2], f[0]]])
        .map(|[a, b]| if a < b { [a, b] } else { [b, a] })
        .collect();
    edges.sort_unstable();
    edges.dedup();
    edges
}

/// Pose the body with linear blend skinning.
pub fn pose_mesh(body: &SkinnedBody, params: &BodyParams) -> Result<MeshState> {
    body.check_params(params)?;
    let shaped = body.shaped_vertices(params);
    let joints = body.shaped_joints(params);
    let n_j = body.n_joints();

    // World rotations and the accumulated displacement of each joint.
    // Written as deltas from the rest pose so that theta = 0 reproduces the
    // shaped template bit-exactly.
    let mut world_rot = vec![Mat3::identity(); n_j];
    let mut joint_shift = vec![Vec3::zeros(); n_j];
    for j in 0..n_j {
        let local = axis_angle_to_matrix(&params.joint_rotation(j));
        match body.parents[j] {
            None => world_rot[j] = local,
            Some(p) => {
                world_rot[j] = world_rot[p] * local;
                joint_shift[j] = joint_shift[p] + (world_rot[p] - Mat3::identity()) * (joints[j] - joints[p]);
            }
        }
    }
    let deltas: Vec<Mat3> = world_rot.iter().map(|r| r - Mat3::identity()).collect();
    let identity_pose = params.theta.iter().all(|v| *v == 0.0);

    let vertices: Vec<Vec3> = if identity_pose {
        shaped
    } else {
        shaped
            .iter()
            .enumerate()
            .map(|(vi, v)| {
                let w = &body.skin_weights[vi * n_j..(vi + 1) * n_j];
                let mut disp = Vec3::zeros();
                for j in 0..n_j {
                    if w[j] != 0.0 {
                        disp += (deltas[j] * (v - joints[j]) + joint_shift[j]) * w[j];
                    }
                }
                v + disp
            })
            .collect()
    };
    let vertex_normals = vertex_normals(&vertices, &body.faces);
    Ok(MeshState { vertices, vertex_normals })
}

/// Area-weighted vertex normals.
pub fn vertex_normals(vertices: &[Vec3], faces: &[[usize; 3]]) -> Vec<Vec3> {
    let mut acc = vec![Vec3::zeros(); vertices.len()];
    for f in faces {
        let c = (vertices[f[1]] - vertices[f[0]]).cross(&(vertices[f[2]] - vertices[f[0]]));
        for &v in f {
            acc[v] += c;
        }
    }
    acc.into_iter()
        .map(|n| {
            let len = n.norm();
            if len > 0.0 {
                n / len
            } else {
                Vec3::zeros()
            }
        })
        .collect()
}

const DEGENERATE_AREA: f64 = 1e-14;

pub fn face_frame(v1: &Vec3, v2: &Vec3, v3: &Vec3) -> Option<FaceFrame> {
    let e1 = v2 - v1;
    let e2 = v3 - v1;
    let c = e1.cross(&e2);
    let c_len = c.norm();
    let e1_len = e1.norm();
    if !(c_len > DEGENERATE_AREA) || !(e1_len > 0.0) || !c_len.is_finite() {
        return None;
    }
    let normal = c / c_len;
    let tangent = e1 / e1_len;
    let bitangent = normal.cross(&tangent);
    let rot = Mat3::from_columns(&[tangent, bitangent, normal]);
    Some(FaceFrame {
        center: (v1 + v2 + v3) / 3.0,
        normal,
        tangent,
        bitangent,
        rotation: matrix_to_quat(&rot),
        area_scale: (0.5 * c_len).sqrt(),
    })
}

/// Per-face frames: centroid, unit normal, first-edge tangent, rotation and
/// `sqrt(area)`.
pub fn face_frames(vertices: &[Vec3], faces: &[[usize; 3]]) -> Result<Vec<FaceFrame>> {
    faces
        .iter()
        .enumerate()
        .map(|(fi, f)| {
            face_frame(&vertices[f[0]], &vertices[f[1]], &vertices[f[2]])
                .ok_or(Error::DegenerateFace { face: fi })
        })
        .collect()
}

/// Gradient of a face frame's outputs w.r.t. its three vertices.
pub fn face_frame_backward(v1: &Vec3, v2: &Vec3, v3: &Vec3, g: &FaceFrameGrad) -> [Vec3; 3] {
    let e1 = v2 - v1;
    let e2 = v3 - v1;
    let c = e1.cross(&e2);
    let c_len = c.norm();
    let e1_len = e1.norm();
    let n = c / c_len;
    let t = e1 / e1_len;
    let s = (0.5 * c_len).sqrt();

    let mut gn = g.normal + t.cross(&g.bitangent);
    let gt = g.tangent + g.bitangent.cross(&n);
    let mut ge1 = (gt - t * t.dot(&gt)) / e1_len;
    gn = (gn - n * n.dot(&gn)) / c_len;
    let gc = gn + n * (g.area_scale * 0.25 / s);
    ge1 += e2.cross(&gc);
    let ge2 = gc.cross(&e1);
    let gm = g.center / 3.0;
    [gm - ge1 - ge2, gm + ge1, gm + ge2]
}

/// Write a mesh as Wavefront OBJ with per-vertex normals (1-based indices).
pub fn write_obj(path: &Path, mesh: &MeshState, faces: &[[usize; 3]]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        for v in &mesh.vertices {
            writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
        }
        for n in &mesh.vertex_normals {
            writeln!(w, "vn {} {} {}", n.x, n.y, n.z)?;
        }
        for f in faces {
            let (a, b, c) = (f[0] + 1, f[1] + 1, f[2] + 1);
            writeln!(w, "f {a}//{a} {b}//{b} {c}//{c}")?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}
