//! Gaussian primitives: activation of raw network outputs, covariance,
//! spherical-harmonic color and the `.lha` avatar container.
//!
//! `.lha` layout (little-endian):
//!
//! ```text
//! "LHA1"  u32 version  u32 N  u32 C
//! f32 positions N×3, rotations N×4 (w,x,y,z), scales N×3, opacities N, sh N×C
//! u32 J                       -- 0 when no per-Gaussian weights are stored
//! f32 weights N×J, u32 joint ids J
//! u32 has_field               -- 0 or 1
//! skin field block (see `SkinField::write_block`)
//! ```
//!
//! SH coefficients are stored basis-major: `f[k*3 + channel]`.

use std::path::Path;

use nalgebra::Matrix3;
use thiserror::Error;

use crate::autodiff::{AdError, NdArray, Tape, Var};
use crate::math::{covariance, normalize_quat, normalize_quat_backward, Quat};
use crate::skinning::SkinField;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;

pub const DEFAULT_OFFSET_CAP: f64 = 0.06;
pub const DEFAULT_MIN_SCALE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum AvatarError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported avatar file: {0}")]
    Version(String),
    #[error("malformed avatar file: {0}")]
    Parse(String),
    #[error("invalid gaussian set: {0}")]
    Invalid(String),
    #[error(transparent)]
    Ad(#[from] AdError),
}

/// Number of SH coefficients (all three channels) for a degree.
pub fn sh_coeffs(degree: usize) -> usize {
    3 * (degree + 1) * (degree + 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<Quat>,
    pub scales: Vec<[f64; 3]>,
    pub opacities: Vec<f64>,
    /// N×C, row-major.
    pub sh: Vec<f64>,
    pub sh_degree: usize,
}

/// Unconstrained per-point outputs of the regression head.
#[derive(Clone, Debug, PartialEq)]
pub struct RawGaussianParams {
    pub offsets: NdArray,
    pub rotations: NdArray,
    pub scales: NdArray,
    pub opacities: NdArray,
    pub sh: NdArray,
}

/// Gaussian attributes recorded on a tape: `[N,3]`, `[N,4]`, `[N,3]`, `[N,1]`, `[N,C]`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub positions: Var,
    pub rotations: Var,
    pub scales: Var,
    pub opacities: Var,
    pub sh: Var,
}

/// Raw head outputs recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct RawVars {
    pub offsets: Var,
    pub rotations: Var,
    pub scales: Var,
    pub opacities: Var,
    pub sh: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Activation {
    pub offset_cap: f64,
    pub min_scale: f64,
}

impl Default for Activation {
    fn default() -> Self {
        Self { offset_cap: DEFAULT_OFFSET_CAP, min_scale: DEFAULT_MIN_SCALE }
    }
}

impl GaussianSet {
    pub fn empty(sh_degree: usize) -> Self {
        Self { positions: vec![], rotations: vec![], scales: vec![], opacities: vec![], sh: vec![], sh_degree }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn num_coeffs(&self) -> usize {
        sh_coeffs(self.sh_degree)
    }

    pub fn sh_row(&self, i: usize) -> &[f64] {
        let c = self.num_coeffs();
        &self.sh[i * c..(i + 1) * c]
    }

    /// `R(r_i) diag(σ_i²) R(r_i)ᵀ`.
    pub fn covariance_of(&self, i: usize) -> Matrix3<f64> {
        covariance(&self.rotations[i], &self.scales[i])
    }

    pub fn validate(&self) -> Result<(), AvatarError> {
        let n = self.len();
        let bad = |s: String| Err(AvatarError::Invalid(s));
        if self.sh_degree > 1 {
            return bad(format!("sh degree {} unsupported", self.sh_degree));
        }
        if self.rotations.len() != n || self.scales.len() != n || self.opacities.len() != n || self.sh.len() != n * self.num_coeffs() {
            return bad("attribute lengths disagree".into());
        }
        for i in 0..n {
            let finite = self.positions[i].iter().chain(&self.rotations[i]).chain(&self.scales[i]).all(|x| x.is_finite())
                && self.sh_row(i).iter().all(|x| x.is_finite());
            if !finite {
                return bad(format!("non-finite attribute at gaussian {i}"));
            }
            let q = &self.rotations[i];
            let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return bad(format!("rotation {i} has norm {norm}"));
            }
            if self.scales[i].iter().any(|&s| !(s > 0.0)) {
                return bad(format!("scale {i} not positive"));
            }
            if !(0.0..=1.0).contains(&self.opacities[i]) {
                return bad(format!("opacity {i} = {} outside [0, 1]", self.opacities[i]));
            }
        }
        Ok(())
    }

    /// Records the attributes on a tape, as differentiable leaves when `params` is set.
    pub fn to_vars(&self, tape: &mut Tape, params: bool) -> Result<GaussianVars, AdError> {
        let n = self.len();
        let mut leaf = |shape: Vec<usize>, data: Vec<f64>| {
            let a = NdArray::new(shape, data)?;
            if params {
                tape.param(a)
            } else {
                tape.constant(a)
            }
        };
        Ok(GaussianVars {
            positions: leaf(vec![n, 3], self.positions.concat())?,
            rotations: leaf(vec![n, 4], self.rotations.concat())?,
            scales: leaf(vec![n, 3], self.scales.concat())?,
            opacities: leaf(vec![n, 1], self.opacities.clone())?,
            sh: leaf(vec![n, self.num_coeffs()], self.sh.clone())?,
        })
    }

    pub fn from_vars(tape: &Tape, vars: &GaussianVars, sh_degree: usize) -> Self {
        let rows3 = |v: Var| tape.value(v).data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<_>>();
        Self {
            positions: rows3(vars.positions),
            rotations: tape.value(vars.rotations).data().chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect(),
            scales: rows3(vars.scales),
            opacities: tape.value(vars.opacities).data().to_vec(),
            sh: tape.value(vars.sh).data().to_vec(),
            sh_degree,
        }
    }

    /// Rounds every attribute to `f32`, the precision of the avatar file.
    pub fn rounded_to_f32(&self) -> Self {
        let r = |x: &f64| *x as f32 as f64;
        Self {
            positions: self.positions.iter().map(|p| p.map(|x| r(&x))).collect(),
            rotations: self.rotations.iter().map(|q| q.map(|x| r(&x))).collect(),
            scales: self.scales.iter().map(|s| s.map(|x| r(&x))).collect(),
            opacities: self.opacities.iter().map(r).collect(),
            sh: self.sh.iter().map(r).collect(),
            sh_degree: self.sh_degree,
        }
    }
}

/// Evaluates view-dependent color for degree ≤ 1 coefficients (`C` = 3 or 12).
pub fn eval_sh(f: &[f64], view_dir: &[f64; 3]) -> Result<[f64; 3], AvatarError> {
    let n = (view_dir[0] * view_dir[0] + view_dir[1] * view_dir[1] + view_dir[2] * view_dir[2]).sqrt();
    if !(n > 0.0) {
        return Err(AvatarError::Invalid("zero-length view direction".into()));
    }
    let d = [view_dir[0] / n, view_dir[1] / n, view_dir[2] / n];
    let basis = sh_basis(&d);
    let mut rgb = [0.0; 3];
    for (ch, out) in rgb.iter_mut().enumerate() {
        let mut s = 0.5;
        for (k, y) in basis.iter().enumerate().take(f.len() / 3) {
            s += f[k * 3 + ch] * y;
        }
        *out = s.clamp(0.0, 1.0);
    }
    Ok(rgb)
}

/// Real SH basis up to degree 1 at a unit direction.
pub fn sh_basis(d: &[f64; 3]) -> [f64; 4] {
    [SH_C0, -SH_C1 * d[1], SH_C1 * d[2], -SH_C1 * d[0]]
}

/// Maps raw outputs to valid Gaussians on the tape:
/// `p = x + cap·tanh(Δ)`, `r = Δr/|Δr|` (zero rows → identity), `σ = σ_min + softplus(·)`,
/// `ρ = sigmoid(·)`, `f` unchanged. Also returns the offsets `p − x`.
pub fn activate(tape: &mut Tape, raw: &RawVars, anchors: Var, act: &Activation) -> Result<(GaussianVars, Var), AdError> {
    if tape.shape(raw.offsets) != tape.shape(anchors) {
        return Err(AdError::Shape(format!(
            "offsets {:?} vs anchors {:?}",
            tape.shape(raw.offsets),
            tape.shape(anchors)
        )));
    }
    let t = tape.tanh(raw.offsets)?;
    let offsets = tape.scale(t, act.offset_cap)?;
    let positions = tape.add(anchors, offsets)?;
    let rotations = normalize_quat_rows(tape, raw.rotations)?;
    let sp = tape.softplus(raw.scales)?;
    let scales = tape.add_scalar(sp, act.min_scale)?;
    let opacities = tape.sigmoid(raw.opacities)?;
    Ok((GaussianVars { positions, rotations, scales, opacities, sh: raw.sh }, offsets))
}

/// Plain-array form of [`activate`].
pub fn activate_raw(raw: &RawGaussianParams, anchors: &[[f64; 3]], act: &Activation) -> Result<GaussianSet, AvatarError> {
    let c = raw.sh.cols();
    let sh_degree = match c {
        3 => 0,
        12 => 1,
        _ => return Err(AvatarError::Invalid(format!("{c} SH coefficients per gaussian"))),
    };
    let mut tape = Tape::new();
    let rv = RawVars {
        offsets: tape.constant(raw.offsets.clone())?,
        rotations: tape.constant(raw.rotations.clone())?,
        scales: tape.constant(raw.scales.clone())?,
        opacities: tape.constant(raw.opacities.clone())?,
        sh: tape.constant(raw.sh.clone())?,
    };
    let x = tape.constant(NdArray::new(vec![anchors.len(), 3], anchors.concat())?)?;
    let (g, _) = activate(&mut tape, &rv, x, act)?;
    Ok(GaussianSet::from_vars(&tape, &g, sh_degree))
}

/// Row-wise quaternion normalization; all-zero rows become `(1, 0, 0, 0)` with zero gradient.
pub fn normalize_quat_rows(tape: &mut Tape, q: Var) -> Result<Var, AdError> {
    let x = tape.value(q);
    if x.ndim() != 2 || x.cols() != 4 {
        return Err(AdError::Shape(format!("quaternion rows need shape [N,4], got {:?}", x.shape())));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(4) {
        let qi: Quat = [row[0], row[1], row[2], row[3]];
        let unit = if qi.iter().all(|&v| v == 0.0) { [1.0, 0.0, 0.0, 0.0] } else { normalize_quat(&qi).0 };
        row.copy_from_slice(&unit);
    }
    tape.record(
        "normalize_quat",
        &[q],
        out,
        Box::new(|ctx| {
            let mut g = NdArray::zeros_like(ctx.inputs[0]);
            let rows = ctx.inputs[0].data().chunks(4).zip(ctx.grad.data().chunks(4)).zip(ctx.output.data().chunks(4));
            for (i, ((qi, gi), ui)) in rows.enumerate() {
                if qi.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let norm = (qi[0] * qi[0] + qi[1] * qi[1] + qi[2] * qi[2] + qi[3] * qi[3]).sqrt();
                let d = normalize_quat_backward(&[ui[0], ui[1], ui[2], ui[3]], norm, &[gi[0], gi[1], gi[2], gi[3]]);
                g.data_mut()[i * 4..i * 4 + 4].copy_from_slice(&d);
            }
            vec![Some(g)]
        }),
    )
}

/// Per-Gaussian skinning data stored with an avatar.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AvatarSkinning {
    /// N×J weights and the joint ids they refer to.
    pub weights: Option<(NdArray, Vec<u32>)>,
    pub field: Option<SkinField>,
}

const LHA_MAGIC: &[u8; 4] = b"LHA1";
const LHA_VERSION: u32 = 1;

pub fn avatar_to_bytes(g: &GaussianSet, skin: &AvatarSkinning) -> Result<Vec<u8>, AvatarError> {
    g.validate()?;
    let mut out = LHA_MAGIC.to_vec();
    let u32s = |out: &mut Vec<u8>, x: u32| out.extend_from_slice(&x.to_le_bytes());
    let f32s = |out: &mut Vec<u8>, xs: &mut dyn Iterator<Item = f64>| {
        for x in xs {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    };
    u32s(&mut out, LHA_VERSION);
    u32s(&mut out, g.len() as u32);
    u32s(&mut out, g.num_coeffs() as u32);
    f32s(&mut out, &mut g.positions.iter().flatten().copied());
    f32s(&mut out, &mut g.rotations.iter().flatten().copied());
    f32s(&mut out, &mut g.scales.iter().flatten().copied());
    f32s(&mut out, &mut g.opacities.iter().copied());
    f32s(&mut out, &mut g.sh.iter().copied());
    match &skin.weights {
        None => u32s(&mut out, 0),
        Some((w, ids)) => {
            if w.shape() != [g.len(), ids.len()] {
                return Err(AvatarError::Invalid(format!("weights shape {:?} for {} gaussians", w.shape(), g.len())));
            }
            u32s(&mut out, ids.len() as u32);
            f32s(&mut out, &mut w.data().iter().copied());
            ids.iter().for_each(|&id| u32s(&mut out, id));
        }
    }
    match &skin.field {
        None => u32s(&mut out, 0),
        Some(field) => {
            u32s(&mut out, 1);
            field.write_block(&mut out);
        }
    }
    Ok(out)
}

pub fn avatar_from_bytes(bytes: &[u8]) -> Result<(GaussianSet, AvatarSkinning), AvatarError> {
    if bytes.len() < 4 || &bytes[..4] != LHA_MAGIC {
        return Err(AvatarError::Version("bad magic, expected LHA1".into()));
    }
    let mut r = ByteReader { bytes, pos: 4 };
    let version = r.u32()?;
    if version != LHA_VERSION {
        return Err(AvatarError::Version(format!("version {version}, expected {LHA_VERSION}")));
    }
    let n = r.u32()? as usize;
    let c = r.u32()? as usize;
    let sh_degree = match c {
        3 => 0,
        12 => 1,
        _ => return Err(AvatarError::Parse(format!("{c} SH coefficients per gaussian"))),
    };
    let p = r.f32s(n * 3)?;
    let q = r.f32s(n * 4)?;
    let s = r.f32s(n * 3)?;
    let g = GaussianSet {
        positions: p.chunks(3).map(|x| [x[0], x[1], x[2]]).collect(),
        rotations: q.chunks(4).map(|x| [x[0], x[1], x[2], x[3]]).collect(),
        scales: s.chunks(3).map(|x| [x[0], x[1], x[2]]).collect(),
        opacities: r.f32s(n)?,
        sh: r.f32s(n * c)?,
        sh_degree,
    };
    g.validate()?;
    let j = r.u32()? as usize;
    let weights = if j == 0 {
        None
    } else {
        let w = NdArray::new(vec![n, j], r.f32s(n * j)?)?;
        let ids = (0..j).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        Some((w, ids))
    };
    let field = match r.u32()? {
        0 => None,
        1 => {
            let (field, used) = SkinField::read_block(&bytes[r.pos..]).map_err(AvatarError::Parse)?;
            r.pos += used;
            Some(field)
        }
        other => return Err(AvatarError::Parse(format!("skin field flag {other}"))),
    };
    if r.pos != bytes.len() {
        return Err(AvatarError::Parse(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((g, AvatarSkinning { weights, field }))
}

pub fn write_avatar(path: &Path, g: &GaussianSet, skin: &AvatarSkinning) -> Result<(), AvatarError> {
    std::fs::write(path, avatar_to_bytes(g, skin)?)?;
    Ok(())
}

pub fn read_avatar(path: &Path) -> Result<(GaussianSet, AvatarSkinning), AvatarError> {
    avatar_from_bytes(&std::fs::read(path)?)
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl ByteReader<'_> {
    pub fn take(&mut self, len: usize) -> Result<&[u8], AvatarError> {
        if len > self.bytes.len() - self.pos {
            return Err(AvatarError::Parse(format!("unexpected end of data at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32, AvatarError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, count: usize) -> Result<Vec<f64>, AvatarError> {
        Ok(self.take(count * 4)?.chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
    }
}
