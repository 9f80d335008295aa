//! Simplified parametric body: template mesh, skeleton, linear shape space,
//! forward kinematics and area-weighted surface sampling.
//!
//! The `.lbm` container is little-endian: the magic `LBM1`, then tagged sections
//! (`[u8; 4]` tag, `u32` byte length, payload) in this order:
//!
//! | tag    | payload                                   |
//! |--------|-------------------------------------------|
//! | `DIMS` | `u32` V, F, J, B                          |
//! | `VERT` | V×3 `f32`                                 |
//! | `FACE` | F×3 `u32`                                 |
//! | `JNTS` | J×3 `f32` rest joint positions            |
//! | `PRNT` | J `i32` parent indices (root is -1)       |
//! | `SKIN` | V×J `f32` skin weights                    |
//! | `SHAP` | V×3×B `f32` shape displacements           |
//! | `JREG` | J×V `f32` joint regressor                 |
//! | `REGN` | V `u8` region labels (0 body, 1 head)     |

use std::path::Path;

use nalgebra::{Matrix4, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::math::{axis_angle_to_mat, rigid, translation};

#[derive(Debug, Error)]
pub enum BodyError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid body model: {0}")]
    Invalid(String),
    #[error("expected {expected} shape coefficients, got {got}")]
    ShapeLength { expected: usize, got: usize },
    #[error("pose has {got} joints, body has {expected}")]
    PoseLength { expected: usize, got: usize },
    #[error("degenerate mesh: total surface area is zero")]
    DegenerateMesh,
    #[error("sample count must be at least 1")]
    NoSamples,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Region {
    Body = 0,
    Head = 1,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BodyTemplate {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
    pub joints: Vec<[f64; 3]>,
    pub parents: Vec<i32>,
    /// V×J, row-major.
    pub skin_weights: Vec<f64>,
    /// V×3×B, row-major.
    pub shape_basis: Vec<f64>,
    /// J×V, row-major.
    pub joint_regressor: Vec<f64>,
    pub regions: Vec<Region>,
    pub num_betas: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    pub axis_angle: Vec<[f64; 3]>,
    pub root_translation: [f64; 3],
}

impl Pose {
    pub fn identity(joints: usize) -> Self {
        Self { axis_angle: vec![[0.0; 3]; joints], root_translation: [0.0; 3] }
    }

    /// One whitespace-separated line: root translation, then J axis-angle triples.
    pub fn to_line(&self) -> String {
        let vals: Vec<String> =
            self.root_translation.iter().chain(self.axis_angle.iter().flatten()).map(|v| format!("{v:?}")).collect();
        vals.join(" ")
    }

    pub fn from_line(line: &str) -> Result<Self, BodyError> {
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| BodyError::Parse(format!("bad number `{t}` in pose"))))
            .collect::<Result<_, _>>()?;
        if vals.len() < 3 || (vals.len() - 3) % 3 != 0 || vals.iter().any(|v| !v.is_finite()) {
            return Err(BodyError::Parse(format!("pose line needs 3 + 3·J finite numbers, got {}", vals.len())));
        }
        Ok(Self {
            root_translation: [vals[0], vals[1], vals[2]],
            axis_angle: vals[3..].chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
        })
    }
}

/// Motion table: one pose line per frame; blank lines and `#` comments are skipped.
pub fn parse_motion(text: &str) -> Result<Vec<Pose>, BodyError> {
    let frames: Vec<Pose> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(Pose::from_line)
        .collect::<Result<_, _>>()?;
    if frames.is_empty() {
        return Err(BodyError::Parse("motion has no frames".into()));
    }
    let j = frames[0].axis_angle.len();
    if let Some(k) = frames.iter().position(|f| f.axis_angle.len() != j) {
        return Err(BodyError::Parse(format!("frame {k} has {} joints, frame 0 has {j}", frames[k].axis_angle.len())));
    }
    Ok(frames)
}

pub fn motion_to_text(frames: &[Pose]) -> String {
    frames.iter().map(|f| f.to_line() + "\n").collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledPoints {
    pub positions: Vec<[f64; 3]>,
    pub faces: Vec<u32>,
    pub barycentric: Vec<[f64; 3]>,
    pub regions: Vec<Region>,
}

impl SampledPoints {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

const MAGIC: &[u8; 4] = b"LBM1";
const SECTIONS: [&str; 9] = ["DIMS", "VERT", "FACE", "JNTS", "PRNT", "SKIN", "SHAP", "JREG", "REGN"];

impl BodyTemplate {
    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn weights_row(&self, v: usize) -> &[f64] {
        let j = self.num_joints();
        &self.skin_weights[v * j..(v + 1) * j]
    }

    /// Checks every structural invariant, naming the first offending field and index.
    pub fn validate(&self) -> Result<(), BodyError> {
        let (v, j, b) = (self.num_vertices(), self.num_joints(), self.num_betas);
        let bad = |s: String| Err(BodyError::Invalid(s));
        if v == 0 || j == 0 {
            return bad("empty vertex or joint set".into());
        }
        if self.parents.len() != j {
            return bad(format!("{} parents for {} joints", self.parents.len(), j));
        }
        if self.skin_weights.len() != v * j
            || self.shape_basis.len() != v * 3 * b
            || self.joint_regressor.len() != j * v
            || self.regions.len() != v
        {
            return bad("array sizes disagree with dimensions".into());
        }
        for (i, p) in self.vertices.iter().chain(&self.joints).enumerate() {
            if p.iter().any(|x| !x.is_finite()) {
                return bad(format!("non-finite coordinate in point {i}"));
            }
        }
        for (i, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&k| k as usize >= v) {
                return bad(format!("face {i} references a missing vertex"));
            }
        }
        if self.parents[0] != -1 {
            return bad("parent of root joint 0 must be -1".into());
        }
        for (k, &p) in self.parents.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= k {
                return bad(format!("parent[{k}] = {p} must lie in [0, {k})"));
            }
        }
        for i in 0..v {
            let row = self.weights_row(i);
            if row.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
                return bad(format!("weights row {i} has a negative or non-finite entry"));
            }
            if (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return bad(format!("weights row {i} not normalized"));
            }
        }
        if self.shape_basis.iter().chain(&self.joint_regressor).any(|x| !x.is_finite()) {
            return bad("non-finite shape basis or regressor entry".into());
        }
        if !self.regions.contains(&Region::Head) || !self.regions.contains(&Region::Body) {
            return bad("need at least one head and one body vertex".into());
        }
        Ok(())
    }

    /// Shaped vertices `v + Σ_b β_b · basis_b`.
    pub fn apply_shape(&self, beta: &[f64]) -> Result<Vec<[f64; 3]>, BodyError> {
        let b = self.num_betas;
        if beta.len() != b {
            return Err(BodyError::ShapeLength { expected: b, got: beta.len() });
        }
        Ok(self
            .vertices
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut q = *p;
                for (c, qc) in q.iter_mut().enumerate() {
                    let base = (i * 3 + c) * b;
                    for (k, &bk) in beta.iter().enumerate() {
                        *qc += bk * self.shape_basis[base + k];
                    }
                }
                q
            })
            .collect())
    }

    /// Rest joints moved by the regressed displacement of shaped vertices.
    pub fn shaped_joints(&self, shaped: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let v = self.num_vertices();
        self.joints
            .iter()
            .enumerate()
            .map(|(j, rest)| {
                let row = &self.joint_regressor[j * v..(j + 1) * v];
                let mut out = *rest;
                for (k, &w) in row.iter().enumerate() {
                    if w != 0.0 {
                        for c in 0..3 {
                            out[c] += w * (shaped[k][c] - self.vertices[k][c]);
                        }
                    }
                }
                out
            })
            .collect()
    }

    /// Per-joint world transforms relative to the rest pose.
    pub fn forward_kinematics(&self, pose: &Pose) -> Result<Vec<Matrix4<f64>>, BodyError> {
        forward_kinematics(&self.joints, &self.parents, pose)
    }

    /// Joint locations after posing.
    pub fn posed_joints(&self, pose: &Pose) -> Result<Vec<[f64; 3]>, BodyError> {
        let g = self.forward_kinematics(pose)?;
        Ok(self
            .joints
            .iter()
            .zip(&g)
            .map(|(c, m)| {
                let p = m * Vector4::new(c[0], c[1], c[2], 1.0);
                [p.x, p.y, p.z]
            })
            .collect())
    }

    /// Area-weighted surface samples on the given (possibly shaped) vertices.
    pub fn sample_surface_points(
        &self,
        vertices: &[[f64; 3]],
        n: usize,
        seed: u64,
    ) -> Result<SampledPoints, BodyError> {
        sample_surface(vertices, &self.faces, &self.regions, n, seed)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (v, f, j, b) = (self.num_vertices(), self.faces.len(), self.num_joints(), self.num_betas);
        let mut out = MAGIC.to_vec();
        let mut section = |tag: &str, payload: Vec<u8>| {
            out.extend_from_slice(tag.as_bytes());
            out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
            out.extend_from_slice(&payload);
        };
        section("DIMS", [v, f, j, b].iter().flat_map(|&x| (x as u32).to_le_bytes()).collect());
        section("VERT", f32_bytes(self.vertices.iter().flatten()));
        section("FACE", self.faces.iter().flatten().flat_map(|x| x.to_le_bytes()).collect());
        section("JNTS", f32_bytes(self.joints.iter().flatten()));
        section("PRNT", self.parents.iter().flat_map(|x| x.to_le_bytes()).collect());
        section("SKIN", f32_bytes(&self.skin_weights));
        section("SHAP", f32_bytes(&self.shape_basis));
        section("JREG", f32_bytes(&self.joint_regressor));
        section("REGN", self.regions.iter().map(|&r| r as u8).collect());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, BodyError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(BodyError::Parse("bad magic, expected LBM1".into()));
        }
        let mut pos = 4;
        let mut payloads: Vec<&[u8]> = Vec::new();
        for tag in SECTIONS {
            if bytes.len() < pos + 8 {
                return Err(BodyError::Parse(format!("missing section {tag}")));
            }
            if &bytes[pos..pos + 4] != tag.as_bytes() {
                return Err(BodyError::Parse(format!("expected section {tag} at byte {pos}")));
            }
            let len = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
            pos += 8;
            if bytes.len() < pos + len {
                return Err(BodyError::Parse(format!("section {tag} truncated")));
            }
            payloads.push(&bytes[pos..pos + len]);
            pos += len;
        }
        if pos != bytes.len() {
            return Err(BodyError::Parse(format!("{} trailing bytes", bytes.len() - pos)));
        }
        let dims: Vec<usize> = read_u32(payloads[0], "DIMS", 4)?.into_iter().map(|x| x as usize).collect();
        let (v, f, j, b) = (dims[0], dims[1], dims[2], dims[3]);
        let triples = |x: Vec<f64>| x.chunks(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<_>>();
        let faces = read_u32(payloads[2], "FACE", f * 3)?;
        let parents = read_exact(payloads[4], "PRNT", j * 4)?
            .chunks(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let regions = read_exact(payloads[8], "REGN", v)?
            .iter()
            .enumerate()
            .map(|(i, &r)| match r {
                0 => Ok(Region::Body),
                1 => Ok(Region::Head),
                _ => Err(BodyError::Invalid(format!("region label {r} at vertex {i}"))),
            })
            .collect::<Result<_, _>>()?;
        let body = Self {
            vertices: triples(read_f32(payloads[1], "VERT", v * 3)?),
            faces: faces.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
            joints: triples(read_f32(payloads[3], "JNTS", j * 3)?),
            parents,
            skin_weights: read_f32(payloads[5], "SKIN", v * j)?,
            shape_basis: read_f32(payloads[6], "SHAP", v * 3 * b)?,
            joint_regressor: read_f32(payloads[7], "JREG", j * v)?,
            regions,
            num_betas: b,
        };
        body.validate()?;
        Ok(body)
    }

    pub fn load(path: &Path) -> Result<Self, BodyError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), BodyError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// The bundled 402-vertex, 16-joint humanoid.
    pub fn bundled() -> Self {
        Self::from_bytes(include_bytes!("../assets/minibody.lbm")).expect("bundled body model is valid")
    }
}

fn f32_bytes<'a>(xs: impl IntoIterator<Item = &'a f64>) -> Vec<u8> {
    xs.into_iter().flat_map(|&x| (x as f32).to_le_bytes()).collect()
}

fn read_exact<'a>(payload: &'a [u8], tag: &str, len: usize) -> Result<&'a [u8], BodyError> {
    if payload.len() != len {
        return Err(BodyError::Parse(format!("section {tag} has {} bytes, expected {len}", payload.len())));
    }
    Ok(payload)
}

fn read_f32(payload: &[u8], tag: &str, count: usize) -> Result<Vec<f64>, BodyError> {
    Ok(read_exact(payload, tag, count * 4)?
        .chunks(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}

fn read_u32(payload: &[u8], tag: &str, count: usize) -> Result<Vec<u32>, BodyError> {
    Ok(read_exact(payload, tag, count * 4)?
        .chunks(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// `G_j = G_parent · T(c_j) R(θ_j) T(−c_j)`, with the root translation applied first.
pub fn forward_kinematics(joints: &[[f64; 3]], parents: &[i32], pose: &Pose) -> Result<Vec<Matrix4<f64>>, BodyError> {
    if pose.axis_angle.len() != joints.len() {
        return Err(BodyError::PoseLength { expected: joints.len(), got: pose.axis_angle.len() });
    }
    let mut out: Vec<Matrix4<f64>> = Vec::with_capacity(joints.len());
    for (j, c) in joints.iter().enumerate() {
        let c = Vector3::new(c[0], c[1], c[2]);
        let local = translation(&c) * rigid(&axis_angle_to_mat(&pose.axis_angle[j]), &Vector3::zeros()) * translation(&-c);
        let g = if parents[j] < 0 {
            let t = pose.root_translation;
            translation(&Vector3::new(t[0], t[1], t[2])) * local
        } else {
            out[parents[j] as usize] * local
        };
        out.push(g);
    }
    Ok(out)
}

fn triangle_area(a: &[f64; 3], b: &[f64; 3], c: &[f64; 3]) -> f64 {
    let u = Vector3::new(b[0] - a[0], b[1] - a[1], b[2] - a[2]);
    let v = Vector3::new(c[0] - a[0], c[1] - a[1], c[2] - a[2]);
    0.5 * u.cross(&v).norm()
}

pub fn sample_surface(
    vertices: &[[f64; 3]],
    faces: &[[u32; 3]],
    regions: &[Region],
    n: usize,
    seed: u64,
) -> Result<SampledPoints, BodyError> {
    if n == 0 {
        return Err(BodyError::NoSamples);
    }
    let mut cumulative = Vec::with_capacity(faces.len());
    let mut total = 0.0;
    for f in faces {
        total += triangle_area(&vertices[f[0] as usize], &vertices[f[1] as usize], &vertices[f[2] as usize]);
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(BodyError::DegenerateMesh);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SampledPoints {
        positions: Vec::with_capacity(n),
        faces: Vec::with_capacity(n),
        barycentric: Vec::with_capacity(n),
        regions: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let u: f64 = rng.gen::<f64>() * total;
        // first face whose cumulative area exceeds u, skipping zero-area faces
        let fi = cumulative.partition_point(|&c| c <= u).min(faces.len() - 1);
        let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
        let s = r1.sqrt();
        let bary = [1.0 - s, s * (1.0 - r2), s * r2];
        let f = faces[fi];
        let pos = barycentric_point(vertices, f, &bary);
        let heads = f.iter().filter(|&&k| regions[k as usize] == Region::Head).count();
        out.positions.push(pos);
        out.faces.push(fi as u32);
        out.barycentric.push(bary);
        out.regions.push(if heads * 2 >= 3 { Region::Head } else { Region::Body });
    }
    Ok(out)
}

pub fn barycentric_point(vertices: &[[f64; 3]], f: [u32; 3], bary: &[f64; 3]) -> [f64; 3] {
    let (a, b, c) = (vertices[f[0] as usize], vertices[f[1] as usize], vertices[f[2] as usize]);
    [
        bary[0] * a[0] + bary[1] * b[0] + bary[2] * c[0],
        bary[0] * a[1] + bary[1] * b[1] + bary[2] * c[1],
        bary[0] * a[2] + bary[1] * b[2] + bary[2] * c[2],
    ]
}

pub mod generator {
    //! Procedural humanoid in a T-pose: sphere head, box torso, capsule limbs,
    //! each built from rings of `SEGMENTS` vertices closed by two poles. World
    //! units are meters, `+y` up, the body faces `+z`.

    use super::{BodyTemplate, Region};

    const SEGMENTS: usize = 10;
    pub const JOINT_NAMES: [&str; 16] = [
        "pelvis", "spine", "neck", "head", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
        "l_hip", "l_knee", "l_ankle", "r_hip", "r_knee", "r_ankle",
    ];
    const PARENTS: [i32; 16] = [-1, 0, 1, 2, 1, 4, 5, 1, 7, 8, 0, 10, 11, 0, 13, 14];
    const NUM_BETAS: usize = 4;

    fn rest_joints() -> [[f64; 3]; 16] {
        [
            [0.0, 0.95, 0.0],
            [0.0, 1.2, 0.0],
            [0.0, 1.45, 0.0],
            [0.0, 1.56, 0.0],
            [0.2, 1.42, 0.0],
            [0.46, 1.42, 0.0],
            [0.72, 1.42, 0.0],
            [-0.2, 1.42, 0.0],
            [-0.46, 1.42, 0.0],
            [-0.72, 1.42, 0.0],
            [0.1, 0.92, 0.0],
            [0.1, 0.5, 0.0],
            [0.1, 0.08, 0.0],
            [-0.1, 0.92, 0.0],
            [-0.1, 0.5, 0.0],
            [-0.1, 0.08, 0.0],
        ]
    }

    enum Kind {
        Head,
        Torso,
        Arm(f64),
        Leg(f64),
    }

    struct Part {
        kind: Kind,
        rings: usize,
        /// joints along the part axis with their axial coordinate
        chain: Vec<(usize, f64)>,
    }

    /// Axial coordinate, ring point, pole points for one part.
    fn ring_point(kind: &Kind, rings: usize, k: usize, s: usize) -> ([f64; 3], f64) {
        let phi = 2.0 * std::f64::consts::PI * s as f64 / SEGMENTS as f64;
        let (c, sn) = (phi.cos(), phi.sin());
        match *kind {
            Kind::Head => {
                let th = std::f64::consts::PI * (k + 1) as f64 / (rings + 1) as f64;
                let (r, y) = (0.11 * th.sin(), 1.62 - 0.11 * th.cos());
                ([r * c, y, r * sn], y)
            }
            Kind::Torso => {
                let y = 0.88 + 0.59 * k as f64 / (rings - 1) as f64;
                ([0.17 * c, y, 0.1 * sn], y)
            }
            Kind::Arm(side) => {
                let u = 0.2 + 0.58 * k as f64 / (rings - 1) as f64;
                ([side * u, 1.42 + 0.045 * c, 0.045 * sn], u)
            }
            Kind::Leg(side) => {
                let y = 0.9 - 0.86 * k as f64 / (rings - 1) as f64;
                ([side * 0.1 + 0.06 * c, y, 0.06 * sn], y)
            }
        }
    }

    fn poles(kind: &Kind) -> [([f64; 3], f64); 2] {
        match *kind {
            Kind::Head => [([0.0, 1.51, 0.0], 1.51), ([0.0, 1.73, 0.0], 1.73)],
            Kind::Torso => [([0.0, 0.88, 0.0], 0.88), ([0.0, 1.47, 0.0], 1.47)],
            Kind::Arm(side) => [([side * 0.2, 1.42, 0.0], 0.2), ([side * 0.82, 1.42, 0.0], 0.82)],
            Kind::Leg(side) => [([side * 0.1, 0.93, 0.0], 0.93), ([side * 0.1, 0.0, 0.0], 0.0)],
        }
    }

    /// Piecewise-linear blend between consecutive chain joints at axial coordinate `u`.
    fn chain_weights(chain: &[(usize, f64)], u: f64, joints: usize) -> Vec<f64> {
        let mut w = vec![0.0; joints];
        let increasing = chain[chain.len() - 1].1 > chain[0].1;
        let before = |a: f64, b: f64| if increasing { a <= b } else { a >= b };
        if before(u, chain[0].1) {
            w[chain[0].0] = 1.0;
            return w;
        }
        for pair in chain.windows(2) {
            let ((ja, ua), (jb, ub)) = (pair[0], pair[1]);
            if before(u, ub) {
                let t = (u - ua) / (ub - ua);
                w[ja] = 1.0 - t;
                w[jb] = t;
                return w;
            }
        }
        w[chain[chain.len() - 1].0] = 1.0;
        w
    }

    fn r32(x: f64) -> f64 {
        x as f32 as f64
    }

    /// Builds the humanoid. All stored values are exactly representable in `f32`.
    pub fn humanoid() -> BodyTemplate {
        let joints = rest_joints();
        let nj = joints.len();
        let parts = vec![
            Part { kind: Kind::Head, rings: 7, chain: vec![(2, 1.45), (3, 1.56)] },
            Part { kind: Kind::Torso, rings: 8, chain: vec![(0, 0.95), (1, 1.2), (2, 1.45)] },
            Part { kind: Kind::Arm(1.0), rings: 6, chain: vec![(4, 0.2), (5, 0.46), (6, 0.72)] },
            Part { kind: Kind::Arm(-1.0), rings: 6, chain: vec![(7, 0.2), (8, 0.46), (9, 0.72)] },
            Part { kind: Kind::Leg(1.0), rings: 6, chain: vec![(10, 0.92), (11, 0.5), (12, 0.08)] },
            Part { kind: Kind::Leg(-1.0), rings: 6, chain: vec![(13, 0.92), (14, 0.5), (15, 0.08)] },
        ];
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        let mut weights = Vec::new();
        let mut basis = Vec::new();
        let mut regions = Vec::new();
        for part in &parts {
            let base = vertices.len() as u32;
            let mut points = Vec::new();
            for k in 0..part.rings {
                for s in 0..SEGMENTS {
                    points.push(ring_point(&part.kind, part.rings, k, s));
                }
            }
            let [first, last] = poles(&part.kind);
            points.push(first);
            points.push(last);
            for (p, u) in points {
                vertices.push(p.map(r32));
                weights.extend(chain_weights(&part.chain, u, nj).into_iter().map(r32));
                regions.push(if matches!(part.kind, Kind::Head) { Region::Head } else { Region::Body });
                basis.extend(displacements(&part.kind, &p).iter().flatten().map(|&x| r32(x)));
            }
            let idx = |k: usize, s: usize| base + (k * SEGMENTS + s % SEGMENTS) as u32;
            let (pole_a, pole_b) = (base + (part.rings * SEGMENTS) as u32, base + (part.rings * SEGMENTS) as u32 + 1);
            for s in 0..SEGMENTS {
                faces.push([pole_a, idx(0, s + 1), idx(0, s)]);
                for k in 0..part.rings - 1 {
                    faces.push([idx(k, s), idx(k, s + 1), idx(k + 1, s + 1)]);
                    faces.push([idx(k, s), idx(k + 1, s + 1), idx(k + 1, s)]);
                }
                faces.push([pole_b, idx(part.rings - 1, s), idx(part.rings - 1, s + 1)]);
            }
        }
        let nv = vertices.len();
        // rows renormalized after f32 rounding can drift by an ulp; fix the largest entry
        for row in weights.chunks_mut(nj) {
            let excess: f64 = row.iter().sum::<f64>() - 1.0;
            if excess != 0.0 {
                let (imax, _) = row.iter().enumerate().fold((0, f64::MIN), |a, (i, &w)| if w > a.1 { (i, w) } else { a });
                row[imax] = r32(row[imax] - excess);
            }
        }
        // regressor: uniform average over vertices dominated by each joint
        let mut regressor = vec![0.0; nj * nv];
        for j in 0..nj {
            let members: Vec<usize> = (0..nv).filter(|&v| weights[v * nj + j] >= 0.5).collect();
            assert!(!members.is_empty(), "joint {} has no dominant vertex", JOINT_NAMES[j]);
            for &v in &members {
                regressor[j * nv + v] = r32(1.0 / members.len() as f64);
            }
        }
        let body = BodyTemplate {
            vertices,
            faces,
            joints: joints.map(|p| p.map(r32)).to_vec(),
            parents: PARENTS.to_vec(),
            skin_weights: weights,
            shape_basis: basis,
            joint_regressor: regressor,
            regions,
            num_betas: NUM_BETAS,
        };
        body.validate().expect("generated body is valid");
        body
    }

    /// Per-vertex displacement for each of the four shape directions:
    /// height, limb girth, shoulder width, leg length.
    fn displacements(kind: &Kind, p: &[f64; 3]) -> [[f64; NUM_BETAS]; 3] {
        let mut d = [[0.0; NUM_BETAS]; 3];
        d[1][0] = 0.1 * p[1];
        let (axis, girth) = match *kind {
            Kind::Head => (None, 0.0),
            Kind::Torso => (Some([0.0, p[1], 0.0]), 0.2),
            Kind::Arm(_) => (Some([p[0], 1.42, 0.0]), 0.2),
            Kind::Leg(side) => (Some([side * 0.1, p[1], 0.0]), 0.2),
        };
        if let Some(a) = axis {
            for c in 0..3 {
                d[c][1] = girth * (p[c] - a[c]);
            }
        }
        match *kind {
            Kind::Arm(side) => d[0][2] = side * 0.05,
            Kind::Torso => d[0][2] = p[0] * 0.2 * (p[1] - 0.88) / 0.59,
            Kind::Leg(_) => d[1][3] = 0.1 * (p[1] - 0.92),
            Kind::Head => {}
        }
        d
    }
}
