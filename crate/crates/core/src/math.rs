//! Small rigid-body and quaternion helpers. Quaternions are `[w, x, y, z]`.

use nalgebra::{Matrix3, Matrix4, Vector3};

pub type Quat = [f64; 4];

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

pub fn quat_norm(q: &Quat) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

/// Rotation matrix of a unit quaternion.
pub fn quat_to_mat(q: &Quat) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Backprop of [`quat_to_mat`] evaluated at a unit quaternion.
pub fn quat_to_mat_backward(q: &Quat, g: &Matrix3<f64>) -> Quat {
    let [w, x, y, z] = *q;
    let dw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)] + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)] - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)] + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    [dw, dx, dy, dz]
}

/// Normalizes `q`; returns the unit quaternion and the norm.
pub fn normalize_quat(q: &Quat) -> (Quat, f64) {
    let n = quat_norm(q);
    ([q[0] / n, q[1] / n, q[2] / n, q[3] / n], n)
}

/// Backprop through `q / |q|` given the unit result and the norm.
pub fn normalize_quat_backward(unit: &Quat, norm: f64, g: &Quat) -> Quat {
    let dot: f64 = (0..4).map(|i| unit[i] * g[i]).sum();
    [
        (g[0] - unit[0] * dot) / norm,
        (g[1] - unit[1] * dot) / norm,
        (g[2] - unit[2] * dot) / norm,
        (g[3] - unit[3] * dot) / norm,
    ]
}

/// Quaternion of a rotation matrix, with `w >= 0`.
pub fn mat_to_quat(m: &Matrix3<f64>) -> Quat {
    let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [0.25 * s, (m[(2, 1)] - m[(1, 2)]) / s, (m[(0, 2)] - m[(2, 0)]) / s, (m[(1, 0)] - m[(0, 1)]) / s]
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        [(m[(2, 1)] - m[(1, 2)]) / s, 0.25 * s, (m[(0, 1)] + m[(1, 0)]) / s, (m[(0, 2)] + m[(2, 0)]) / s]
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        [(m[(0, 2)] - m[(2, 0)]) / s, (m[(0, 1)] + m[(1, 0)]) / s, 0.25 * s, (m[(1, 2)] + m[(2, 1)]) / s]
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        [(m[(1, 0)] - m[(0, 1)]) / s, (m[(0, 2)] + m[(2, 0)]) / s, (m[(1, 2)] + m[(2, 1)]) / s, 0.25 * s]
    };
    let (mut q, _) = normalize_quat(&q);
    if q[0] < 0.0 {
        q.iter_mut().for_each(|v| *v = -*v);
    }
    q
}

/// Rodrigues rotation for an axis-angle vector (radians).
pub fn axis_angle_to_mat(v: &[f64; 3]) -> Matrix3<f64> {
    let axis = Vector3::new(v[0], v[1], v[2]);
    let theta = axis.norm();
    if theta < 1e-300 {
        return Matrix3::identity();
    }
    let k = axis / theta;
    let kx = skew(&k);
    Matrix3::identity() + kx * theta.sin() + kx * kx * (1.0 - theta.cos())
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rigid 4×4 from rotation and translation.
pub fn rigid(r: &Matrix3<f64>, t: &Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
    m
}

pub fn translation(t: &Vector3<f64>) -> Matrix4<f64> {
    rigid(&Matrix3::identity(), t)
}

pub fn rotation_part(m: &Matrix4<f64>) -> Matrix3<f64> {
    m.fixed_view::<3, 3>(0, 0).into_owned()
}

pub fn translation_part(m: &Matrix4<f64>) -> Vector3<f64> {
    m.fixed_view::<3, 1>(0, 3).into_owned()
}

/// Covariance `R(q) diag(s²) R(q)ᵀ` for a unit quaternion.
pub fn covariance(q: &Quat, scale: &[f64; 3]) -> Matrix3<f64> {
    let m = quat_to_mat(q) * Matrix3::from_diagonal(&Vector3::new(scale[0], scale[1], scale[2]));
    m * m.transpose()
}

/// Backprop of [`covariance`]: returns (dL/dq, dL/dscale) for upstream `g = dL/dS`.
pub fn covariance_backward(q: &Quat, scale: &[f64; 3], g: &Matrix3<f64>) -> (Quat, [f64; 3]) {
    let r = quat_to_mat(q);
    let s = Matrix3::from_diagonal(&Vector3::new(scale[0], scale[1], scale[2]));
    let m = r * s;
    let dm = (g + g.transpose()) * m;
    let mut dscale = [0.0; 3];
    let mut dr = Matrix3::zeros();
    for k in 0..3 {
        for i in 0..3 {
            dscale[k] += dm[(i, k)] * r[(i, k)];
            dr[(i, k)] = dm[(i, k)] * scale[k];
        }
    }
    (quat_to_mat_backward(q, &dr), dscale)
}

/// Polar factor of a 3×3 matrix with positive determinant: `m = r · s`, `r` a rotation,
/// `s` symmetric positive definite.
pub fn polar(m: &Matrix3<f64>) -> (Matrix3<f64>, Matrix3<f64>) {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        // flip the weakest singular direction
        let idx = svd.singular_values.imin();
        let mut u2 = u;
        u2.column_mut(idx).neg_mut();
        r = u2 * vt;
    }
    let s = r.transpose() * m;
    (r, 0.5 * (s + s.transpose()))
}

/// Axial vector of the skew part: `v(X) = (X₃₂−X₂₃, X₁₃−X₃₁, X₂₁−X₁₂)`.
pub fn axial(x: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(x[(2, 1)] - x[(1, 2)], x[(0, 2)] - x[(2, 0)], x[(1, 0)] - x[(0, 1)])
}

/// Given `m = r s` (polar) and a cotangent `c` on the body-frame rotation increment `ω`
/// (with `dr = r [ω]×`), returns dL/dm.
pub fn polar_backward(r: &Matrix3<f64>, s: &Matrix3<f64>, c: &Vector3<f64>) -> Option<Matrix3<f64>> {
    let a = Matrix3::identity() * s.trace() - s;
    let b = a.try_inverse()? * c;
    Some(r * skew(&b))
}
