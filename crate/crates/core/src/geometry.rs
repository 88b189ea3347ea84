//! Small rotation and resampling helpers shared by the map, skinning and
//! rendering code.
//!
//! Quaternions are stored as `[w, x, y, z]` and kept in the `w >= 0`
//! hemisphere wherever the engine produces them.

use nalgebra::{Matrix3, Rotation3, Vector3};

pub type Quat = [f64; 4];

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

pub fn quat_norm(q: &Quat) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Flips `q` into the `w >= 0` hemisphere.
pub fn canonical_sign(q: Quat) -> Quat {
    if q[0] < 0.0 {
        [-q[0], -q[1], -q[2], -q[3]]
    } else {
        q
    }
}

/// Rotation matrix of a unit quaternion. The polynomial form is used as is,
/// so the caller is responsible for normalisation.
pub fn quat_to_matrix(q: &Quat) -> Matrix3<f64> {
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

/// Gradient of `quat_to_matrix` w.r.t. the four quaternion components given
/// the upstream gradient on the matrix entries.
pub fn quat_to_matrix_backward(q: &Quat, g: &Matrix3<f64>) -> Quat {
    let [w, x, y, z] = *q;
    let gw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)] - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    [gw, gx, gy, gz]
}

/// Quaternion of a proper rotation matrix, canonical sign.
pub fn matrix_to_quat(m: &Matrix3<f64>) -> Quat {
    let rot = Rotation3::from_matrix_unchecked(*m);
    let q = nalgebra::UnitQuaternion::from_rotation_matrix(&rot);
    canonical_sign([q.w, q.i, q.j, q.k])
}

/// Rotation matrix for an axis-angle vector (angle = norm).
pub fn axis_angle_matrix(v: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::from_scaled_axis(*v).into_inner()
}

/// Closest proper rotation in the Frobenius sense (polar factor), computed
/// from the SVD so it is defined for singular inputs as well.
pub fn nearest_rotation(a: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = a.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Matrix3::identity(),
    };
    let d = (u * v_t).determinant();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum()));
    u * fix * v_t
}

pub fn is_orthonormal(m: &Matrix3<f64>, tol: f64) -> bool {
    let e = m.transpose() * m - Matrix3::identity();
    e.iter().all(|v| v.abs() <= tol)
}

/// Area-weighted resampling of a row-major `sw x sh x ch` grid onto a
/// `dw x dh` grid. Every destination cell averages the source cells it
/// overlaps, weighted by the overlap area. When `mask` is given, only masked
/// source cells contribute and the average is renormalised over them; a
/// destination cell with no masked coverage is zero.
pub fn area_resample(
    src: &[f64],
    sw: usize,
    sh: usize,
    ch: usize,
    dw: usize,
    dh: usize,
    mask: Option<&[bool]>,
) -> Vec<f64> {
    debug_assert_eq!(src.len(), sw * sh * ch);
    let mut out = vec![0.0; dw * dh * ch];
    if sw == 0 || sh == 0 {
        return out;
    }
    let xs = overlap_table(sw, dw);
    let ys = overlap_table(sh, dh);
    let mut acc = vec![0.0; ch];
    for (dy, yspan) in ys.iter().enumerate() {
        for (dx, xspan) in xs.iter().enumerate() {
            acc.iter_mut().for_each(|a| *a = 0.0);
            let mut total = 0.0;
            for &(sy, wy) in yspan {
                for &(sx, wx) in xspan {
                    let si = sy * sw + sx;
                    if let Some(m) = mask {
                        if !m[si] {
                            continue;
                        }
                    }
                    let w = wx * wy;
                    total += w;
                    let s = &src[si * ch..si * ch + ch];
                    for c in 0..ch {
                        acc[c] += w * s[c];
                    }
                }
            }
            if total > 0.0 {
                let o = &mut out[(dy * dw + dx) * ch..(dy * dw + dx) * ch + ch];
                for c in 0..ch {
                    o[c] = acc[c] / total;
                }
            }
        }
    }
    out
}

/// For every destination cell, the source cells it overlaps and the overlap
/// length measured in source cells.
fn overlap_table(src_len: usize, dst_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|d| {
            let lo = d as f64 * scale;
            let hi = (d + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src_len);
            (first..last)
                .filter_map(|s| {
                    let w = (hi.min((s + 1) as f64) - lo.max(s as f64)).max(0.0);
                    (w > 0.0).then_some((s, w))
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn quaternion_matrix_round_trip() {
        let r = axis_angle_matrix(&Vector3::new(0.3, -1.1, 0.7));
        let q = matrix_to_quat(&r);
        assert!(q[0] >= 0.0);
        assert_relative_eq!(quat_to_matrix(&q), r, epsilon = 1e-12);
    }

    #[test]
    fn quat_matrix_backward_matches_finite_differences() {
        let q = [0.4, -0.3, 0.8, 0.2];
        let g = Matrix3::new(0.3, -1.0, 0.5, 2.0, 0.1, -0.7, 0.9, 0.4, -0.2);
        let analytic = quat_to_matrix_backward(&q, &g);
        let h = 1e-6;
        for i in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp[i] += h;
            qm[i] -= h;
            let fp = quat_to_matrix(&qp).component_mul(&g).sum();
            let fm = quat_to_matrix(&qm).component_mul(&g).sum();
            assert_relative_eq!(analytic[i], (fp - fm) / (2.0 * h), epsilon = 1e-7);
        }
    }

    #[test]
    fn nearest_rotation_of_singular_blend_is_a_rotation() {
        let a = Matrix3::from_diagonal(&Vector3::new(0.0, 0.0, 1.0));
        let r = nearest_rotation(&a);
        assert!(is_orthonormal(&r, 1e-9));
        assert_relative_eq!(r.determinant(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn area_resample_preserves_constants() {
        let src = vec![2.5; 10 * 7 * 2];
        for (dw, dh) in [(4, 3), (10, 7), (64, 64), (3, 1)] {
            let out = area_resample(&src, 10, 7, 2, dw, dh, None);
            assert!(out.iter().all(|v| (v - 2.5).abs() < 1e-12));
        }
    }

    #[test]
    fn area_resample_block_average() {
        let src: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let out = area_resample(&src, 4, 4, 1, 2, 2, None);
        assert_eq!(out, vec![2.5, 4.5, 10.5, 12.5]);
    }
}
