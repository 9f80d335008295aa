//! Volumetric skinning-weight field and linear blend skinning of Gaussians.
//!
//! The field stores one weight row per grid node; node `(ix, iy, iz)` sits at
//! `min + (ix, iy, iz) · h` with `h = (max − min) / (R − 1)`, and rows are laid
//! out with `ix` fastest.

use nalgebra::{Matrix3, Matrix4, Vector3};
use rayon::prelude::*;

use crate::autodiff::{AdError, NdArray, Tape, Var};
use crate::body::BodyTemplate;
use crate::math::{mat_to_quat, normalize_quat, normalize_quat_backward, polar, polar_backward, quat_mul, Quat};

#[derive(Clone, Debug, PartialEq)]
pub struct SkinField {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub resolution: usize,
    pub joints: usize,
    /// R³×J, row-major.
    pub weights: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SkinFieldConfig {
    pub resolution: usize,
    pub diffusion_steps: usize,
    pub margin: f64,
}

impl Default for SkinFieldConfig {
    fn default() -> Self {
        Self { resolution: 64, diffusion_steps: 30, margin: 0.1 }
    }
}

impl SkinField {
    pub fn spacing(&self) -> [f64; 3] {
        let r = (self.resolution - 1) as f64;
        [0, 1, 2].map(|c| (self.max[c] - self.min[c]) / r)
    }

    pub fn node_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.resolution + iy) * self.resolution + ix
    }

    pub fn node_position(&self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        let h = self.spacing();
        [self.min[0] + ix as f64 * h[0], self.min[1] + iy as f64 * h[1], self.min[2] + iz as f64 * h[2]]
    }

    pub fn row(&self, node: usize) -> &[f64] {
        &self.weights[node * self.joints..(node + 1) * self.joints]
    }

    /// Trilinear weights at each point, renormalized. Points outside the box clamp to it.
    pub fn query(&self, points: &[[f64; 3]]) -> Vec<f64> {
        let mut out = vec![0.0; points.len() * self.joints];
        for (p, row) in points.iter().zip(out.chunks_mut(self.joints)) {
            let (w, _) = self.interpolate(p, false);
            row.copy_from_slice(&w);
        }
        out
    }

    /// Renormalized interpolated row and, when requested, its derivative w.r.t. the point
    /// (3 rows of J, zero along clamped axes).
    fn interpolate(&self, p: &[f64; 3], with_grad: bool) -> (Vec<f64>, Vec<[f64; 3]>) {
        let r = self.resolution;
        let h = self.spacing();
        let mut base = [0usize; 3];
        let mut t = [0.0; 3];
        let mut inside = [false; 3];
        for c in 0..3 {
            let u = (p[c] - self.min[c]) / h[c];
            let mut uc = u.clamp(0.0, (r - 1) as f64);
            // absorb rounding so queries at a node hit it exactly
            if (uc - uc.round()).abs() < 1e-9 {
                uc = uc.round();
            }
            inside[c] = u > 0.0 && u < (r - 1) as f64;
            let i0 = (uc.floor() as usize).min(r - 2);
            base[c] = i0;
            t[c] = uc - i0 as f64;
        }
        let j = self.joints;
        let mut w = vec![0.0; j];
        let mut dw = vec![[0.0; 3]; if with_grad { j } else { 0 }];
        for corner in 0..8 {
            let o = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let f = |c: usize| if o[c] == 1 { t[c] } else { 1.0 - t[c] };
            let df = |c: usize| if o[c] == 1 { 1.0 } else { -1.0 };
            let coef = f(0) * f(1) * f(2);
            let node = self.node_index(base[0] + o[0], base[1] + o[1], base[2] + o[2]);
            let row = self.row(node);
            if coef != 0.0 {
                for k in 0..j {
                    w[k] += coef * row[k];
                }
            }
            if with_grad {
                let dc = [df(0) * f(1) * f(2), f(0) * df(1) * f(2), f(0) * f(1) * df(2)];
                for k in 0..j {
                    for c in 0..3 {
                        dw[k][c] += dc[c] * row[k];
                    }
                }
            }
        }
        let s: f64 = w.iter().sum();
        let on_node = t.iter().all(|&x| x == 0.0 || x == 1.0);
        let out: Vec<f64> = if on_node { w.clone() } else { w.iter().map(|x| x / s).collect() };
        if with_grad {
            let mut ds = [0.0; 3];
            for d in &dw {
                for c in 0..3 {
                    ds[c] += d[c];
                }
            }
            for k in 0..j {
                for c in 0..3 {
                    dw[k][c] = if inside[c] { (dw[k][c] - out[k] * ds[c]) / s / h[c] } else { 0.0 };
                }
            }
        }
        (out, dw)
    }

    /// Differentiable query: `points` `[N,3]` → weights `[N,J]`.
    pub fn query_op(&self, tape: &mut Tape, points: Var) -> Result<Var, AdError> {
        let x = tape.value(points);
        if x.ndim() != 2 || x.cols() != 3 {
            return Err(AdError::Shape(format!("query points need shape [N,3], got {:?}", x.shape())));
        }
        let n = x.rows();
        let j = self.joints;
        let pts: Vec<[f64; 3]> = x.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
        let results: Vec<(Vec<f64>, Vec<[f64; 3]>)> = pts.iter().map(|p| self.interpolate(p, true)).collect();
        let mut out = Vec::with_capacity(n * j);
        let mut jac = Vec::with_capacity(n * j);
        for (w, dw) in results {
            out.extend(w);
            jac.extend(dw);
        }
        tape.record(
            "skin_query",
            &[points],
            NdArray::new(vec![n, j], out)?,
            Box::new(move |ctx| {
                let mut g = vec![0.0; n * 3];
                for i in 0..n {
                    for k in 0..j {
                        let gk = ctx.grad.data()[i * j + k];
                        for c in 0..3 {
                            g[i * 3 + c] += gk * jac[i * j + k][c];
                        }
                    }
                }
                vec![Some(NdArray::new(vec![n, 3], g).expect("shape"))]
            }),
        )
    }

    /// Appends the little-endian block: `f64` min[3], max[3], `u32` R, J, then R³×J `f64`.
    pub fn write_block(&self, out: &mut Vec<u8>) {
        for v in self.min.iter().chain(&self.max) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.resolution as u32).to_le_bytes());
        out.extend_from_slice(&(self.joints as u32).to_le_bytes());
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }

    /// Parses a block written by [`SkinField::write_block`]; returns the field and bytes consumed.
    pub fn read_block(bytes: &[u8]) -> Result<(Self, usize), String> {
        let header = 6 * 8 + 8;
        if bytes.len() < header {
            return Err("skin field header truncated".into());
        }
        let f = |i: usize| f64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap());
        let min = [f(0), f(1), f(2)];
        let max = [f(3), f(4), f(5)];
        let resolution = u32::from_le_bytes(bytes[48..52].try_into().unwrap()) as usize;
        let joints = u32::from_le_bytes(bytes[52..56].try_into().unwrap()) as usize;
        if resolution < 2 || joints == 0 {
            return Err(format!("skin field resolution {resolution}, joints {joints}"));
        }
        let count = resolution.pow(3) * joints;
        let end = header + count * 8;
        if bytes.len() < end {
            return Err("skin field weights truncated".into());
        }
        let weights = bytes[header..end].chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let field = Self { min, max, resolution, joints, weights };
        field.check_rows(1e-5)?;
        Ok((field, end))
    }

    pub fn check_rows(&self, tol: f64) -> Result<(), String> {
        for (i, row) in self.weights.chunks(self.joints).enumerate() {
            if row.iter().any(|&w| !(w >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > tol {
                return Err(format!("skin field row {i} not normalized"));
            }
        }
        Ok(())
    }
}

/// Seeds grid nodes nearest to each vertex with that vertex's weights, diffuses by
/// 6-neighbor averaging (zero-flux boundary) while re-clamping seeds, renormalizes,
/// and fills unreached nodes from the nearest seed.
pub fn build_skin_field(body: &BodyTemplate, vertices: &[[f64; 3]], cfg: &SkinFieldConfig) -> Result<SkinField, String> {
    let r = cfg.resolution;
    if r < 8 {
        return Err(format!("resolution {r} below 8"));
    }
    if !(cfg.margin >= 0.0) {
        return Err("negative margin".into());
    }
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for v in vertices {
        if v.iter().any(|x| !x.is_finite()) {
            return Err("non-finite template vertex".into());
        }
        for c in 0..3 {
            min[c] = min[c].min(v[c]);
            max[c] = max[c].max(v[c]);
        }
    }
    for c in 0..3 {
        min[c] -= cfg.margin;
        max[c] += cfg.margin;
        if !(max[c] > min[c]) {
            return Err(format!("empty extent along axis {c}"));
        }
    }
    let j = body.num_joints();
    let mut field = SkinField { min, max, resolution: r, joints: j, weights: vec![0.0; r * r * r * j] };
    let h = field.spacing();
    let mut counts = vec![0u32; r * r * r];
    for (vi, v) in vertices.iter().enumerate() {
        let idx = [0, 1, 2].map(|c| (((v[c] - min[c]) / h[c]).round() as usize).min(r - 1));
        let node = field.node_index(idx[0], idx[1], idx[2]);
        counts[node] += 1;
        for (k, w) in body.weights_row(vi).iter().enumerate() {
            field.weights[node * j + k] += w;
        }
    }
    let seeds: Vec<usize> = (0..counts.len()).filter(|&n| counts[n] > 0).collect();
    for &n in &seeds {
        let c = counts[n] as f64;
        field.weights[n * j..(n + 1) * j].iter_mut().for_each(|w| *w /= c);
    }
    let seed_rows: Vec<Vec<f64>> = seeds.iter().map(|&n| field.row(n).to_vec()).collect();
    let is_seed: Vec<bool> = counts.iter().map(|&c| c > 0).collect();

    let mut next = field.weights.clone();
    for _ in 0..cfg.diffusion_steps {
        let cur = &field.weights;
        next.par_chunks_mut(r * j).enumerate().for_each(|(line, out)| {
            let (iy, iz) = (line % r, line / r);
            for ix in 0..r {
                let node = (iz * r + iy) * r + ix;
                let dst = &mut out[ix * j..(ix + 1) * j];
                if is_seed[node] {
                    dst.copy_from_slice(&cur[node * j..(node + 1) * j]);
                    continue;
                }
                let nb = |dx: isize, dy: isize, dz: isize| -> usize {
                    let x = (ix as isize + dx).clamp(0, r as isize - 1) as usize;
                    let y = (iy as isize + dy).clamp(0, r as isize - 1) as usize;
                    let z = (iz as isize + dz).clamp(0, r as isize - 1) as usize;
                    (z * r + y) * r + x
                };
                let ns = [nb(-1, 0, 0), nb(1, 0, 0), nb(0, -1, 0), nb(0, 1, 0), nb(0, 0, -1), nb(0, 0, 1)];
                for k in 0..j {
                    let mut s = 0.0;
                    for &m in &ns {
                        s += cur[m * j + k];
                    }
                    dst[k] = s / 6.0;
                }
            }
        });
        std::mem::swap(&mut field.weights, &mut next);
        for (&n, row) in seeds.iter().zip(&seed_rows) {
            field.weights[n * j..(n + 1) * j].copy_from_slice(row);
        }
    }

    let seed_pos: Vec<[f64; 3]> = seeds
        .iter()
        .map(|&n| field.node_position(n % r, (n / r) % r, n / (r * r)))
        .collect();
    let positions: Vec<[f64; 3]> = (0..r * r * r).map(|n| field.node_position(n % r, (n / r) % r, n / (r * r))).collect();
    field.weights.par_chunks_mut(j).zip(positions.par_iter()).for_each(|(row, p)| {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|w| *w /= s);
            return;
        }
        let mut best = (f64::INFINITY, 0);
        for (si, q) in seed_pos.iter().enumerate() {
            let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
            if d < best.0 {
                best = (d, si);
            }
        }
        let src = &seed_rows[best.1];
        let s: f64 = src.iter().sum();
        row.iter_mut().zip(src).for_each(|(w, v)| *w = v / s);
    });
    Ok(field)
}

/// Blends joint transforms with per-Gaussian weights and moves positions and rotations.
///
/// With `D = Σ_j w_j (M_j − I)`: `p′ = p + D·[p; 1]` and `r′ = quat(polar(I + D₃ₓ₃)) ⊗ r`,
/// normalized. The output is `[N, 7]` (position, then quaternion).
pub fn pose_gaussians(
    tape: &mut Tape,
    positions: Var,
    rotations: Var,
    weights: Var,
    transforms: &[Matrix4<f64>],
) -> Result<Var, AdError> {
    let n = tape.shape(positions)[0];
    let j = transforms.len();
    if tape.shape(positions) != [n, 3] || tape.shape(rotations) != [n, 4] || tape.shape(weights) != [n, j] {
        return Err(AdError::Shape(format!(
            "pose_gaussians: positions {:?}, rotations {:?}, weights {:?}, {} transforms",
            tape.shape(positions),
            tape.shape(rotations),
            tape.shape(weights),
            j
        )));
    }
    let deltas: Vec<Matrix4<f64>> = transforms.iter().map(|m| m - Matrix4::identity()).collect();
    let p = tape.value(positions).data().to_vec();
    let q = tape.value(rotations).data().to_vec();
    let w = tape.value(weights).data().to_vec();

    struct Cache {
        d: Matrix4<f64>,
        r: Matrix3<f64>,
        s: Matrix3<f64>,
        q_rot: Quat,
        prod_norm: f64,
    }
    let mut out = vec![0.0; n * 7];
    let mut caches = Vec::with_capacity(n);
    for i in 0..n {
        let mut d = Matrix4::zeros();
        for (k, dk) in deltas.iter().enumerate() {
            let wk = w[i * j + k];
            if wk != 0.0 {
                d += dk * wk;
            }
        }
        let a = Matrix3::identity() + d.fixed_view::<3, 3>(0, 0);
        if !(a.determinant() > 1e-8) {
            return Err(AdError::Invalid(format!("degenerate blended transform at gaussian {i}")));
        }
        let (r, s) = polar(&a);
        let q_rot = mat_to_quat(&r);
        let pi = Vector3::new(p[i * 3], p[i * 3 + 1], p[i * 3 + 2]);
        let moved = d.fixed_view::<3, 3>(0, 0) * pi + d.fixed_view::<3, 1>(0, 3);
        for c in 0..3 {
            out[i * 7 + c] = p[i * 3 + c] + moved[c];
        }
        let prod = quat_mul(&q_rot, &[q[i * 4], q[i * 4 + 1], q[i * 4 + 2], q[i * 4 + 3]]);
        let (unit, prod_norm) = normalize_quat(&prod);
        out[i * 7 + 3..i * 7 + 7].copy_from_slice(&unit);
        caches.push(Cache { d, r, s, q_rot, prod_norm });
    }
    let value = NdArray::new(vec![n, 7], out)?;
    tape.record(
        "pose_gaussians",
        &[positions, rotations, weights],
        value,
        Box::new(move |ctx| {
            let g = ctx.grad.data();
            let o = ctx.output.data();
            let (p, q) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let mut gp = vec![0.0; n * 3];
            let mut gq = vec![0.0; n * 4];
            let mut gw = vec![0.0; n * j];
            for i in 0..n {
                let c = &caches[i];
                let gpos = Vector3::new(g[i * 7], g[i * 7 + 1], g[i * 7 + 2]);
                let dl = c.d.fixed_view::<3, 3>(0, 0).into_owned();
                let gpi = gpos + dl.transpose() * gpos;
                gp[i * 3..i * 3 + 3].copy_from_slice(gpi.as_slice());
                let unit: Quat = [o[i * 7 + 3], o[i * 7 + 4], o[i * 7 + 5], o[i * 7 + 6]];
                let gu: Quat = [g[i * 7 + 3], g[i * 7 + 4], g[i * 7 + 5], g[i * 7 + 6]];
                let gprod = normalize_quat_backward(&unit, c.prod_norm, &gu);
                let qi: Quat = [q[i * 4], q[i * 4 + 1], q[i * 4 + 2], q[i * 4 + 3]];
                // prod = q_rot ⊗ qi, linear in each factor
                let grq = quat_left_transpose(&c.q_rot, &gprod);
                gq[i * 4..i * 4 + 4].copy_from_slice(&grq);
                let gqrot = quat_right_transpose(&qi, &gprod);
                // body-frame increment ω: dq_rot = q_rot ⊗ (0, ω/2)
                let mut cvec = Vector3::zeros();
                for k in 0..3 {
                    let mut e = [0.0; 4];
                    e[k + 1] = 0.5;
                    let dq = quat_mul(&c.q_rot, &e);
                    cvec[k] = (0..4).map(|m| dq[m] * gqrot[m]).sum();
                }
                let ga = if cvec.iter().any(|&v| v != 0.0) {
                    polar_backward(&c.r, &c.s, &cvec).unwrap_or_else(Matrix3::zeros)
                } else {
                    Matrix3::zeros()
                };
                let ph = [p[i * 3], p[i * 3 + 1], p[i * 3 + 2], 1.0];
                for (k, dk) in deltas.iter().enumerate() {
                    let mut acc = 0.0;
                    for row in 0..3 {
                        let mut moved = 0.0;
                        for col in 0..4 {
                            moved += dk[(row, col)] * ph[col];
                        }
                        acc += gpos[row] * moved;
                        for col in 0..3 {
                            acc += ga[(row, col)] * dk[(row, col)];
                        }
                    }
                    gw[i * j + k] = acc;
                }
            }
            vec![
                Some(NdArray::new(vec![n, 3], gp).expect("shape")),
                Some(NdArray::new(vec![n, 4], gq).expect("shape")),
                Some(NdArray::new(vec![n, j], gw).expect("shape")),
            ]
        }),
    )
}

/// `L(a)ᵀ g` where `a ⊗ b = L(a) b`.
fn quat_left_transpose(a: &Quat, g: &Quat) -> Quat {
    let conj = [a[0], -a[1], -a[2], -a[3]];
    quat_mul(&conj, g)
}

/// `R(b)ᵀ g` where `a ⊗ b = R(b) a`.
fn quat_right_transpose(b: &Quat, g: &Quat) -> Quat {
    let conj = [b[0], -b[1], -b[2], -b[3]];
    quat_mul(g, &conj)
}

/// Plain-value posing of a Gaussian set with fixed weights.
pub fn pose_set(
    g: &crate::gaussian::GaussianSet,
    weights: &NdArray,
    transforms: &[Matrix4<f64>],
) -> Result<crate::gaussian::GaussianSet, AdError> {
    let mut tape = Tape::new();
    let vars = g.to_vars(&mut tape, false)?;
    let w = tape.constant(weights.clone())?;
    let posed = pose_gaussians(&mut tape, vars.positions, vars.rotations, w, transforms)?;
    let v = tape.value(posed);
    let mut out = g.clone();
    for i in 0..g.len() {
        let row = &v.data()[i * 7..i * 7 + 7];
        out.positions[i] = [row[0], row[1], row[2]];
        out.rotations[i] = [row[3], row[4], row[5], row[6]];
    }
    Ok(out)
}
