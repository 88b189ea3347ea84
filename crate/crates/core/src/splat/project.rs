use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use super::{Camera, Splat, ALPHA_CAP, ALPHA_MIN, COVARIANCE_DILATION};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `Σ = A S Sᵀ Aᵀ` with `S = diag(scale)`.
pub fn covariance3d(linear: &Matrix3<f64>, scale: &Vector3<f64>) -> Matrix3<f64> {
    let m = linear * Matrix3::from_diagonal(scale);
    m * m.transpose()
}

/// Perspective Jacobian of the pinhole projection at camera-space `t`.
fn projection_jacobian(camera: &Camera, t: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    Matrix2x3::new(
        camera.fx * iz,
        0.0,
        -camera.fx * t.x * iz * iz,
        0.0,
        camera.fy * iz,
        -camera.fy * t.y * iz * iz,
    )
}

/// Projects a 3D Gaussian: pixel-space mean, dilated 2D covariance and
/// camera-space depth. `None` when the mean is closer than `z_near`.
pub fn project_gaussian(
    camera: &Camera,
    position: &Vector3<f64>,
    sigma: &Matrix3<f64>,
) -> Option<(Vector2<f64>, Matrix2<f64>, f64)> {
    let t = camera.rotation() * position + camera.translation();
    if !(t.z >= camera.z_near) {
        return None;
    }
    let jw = projection_jacobian(camera, &t) * camera.rotation();
    let cov = jw * sigma * jw.transpose() + Matrix2::identity() * COVARIANCE_DILATION;
    let mean = Vector2::new(camera.fx * t.x / t.z + camera.cx, camera.fy * t.y / t.z + camera.cy);
    Some((mean, cov, t.z))
}

/// Alpha of a splat at a pixel, or 0 when the contribution falls under the
/// skip threshold.
pub fn alpha_at(pixel: &Vector2<f64>, mean: &Vector2<f64>, cov2d: &Matrix2<f64>, opacity_logit: f64) -> f64 {
    let conic = cov2d.try_inverse().expect("dilated covariance is invertible");
    let d = pixel - mean;
    let power = -0.5 * (d.transpose() * conic * d)[(0, 0)];
    let alpha = (sigmoid(opacity_logit) * power.exp()).min(ALPHA_CAP);
    if alpha < ALPHA_MIN {
        0.0
    } else {
        alpha
    }
}

/// Everything the rasterizer and the backward pass need about one visible
/// splat.
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    pub index: u32,
    pub cam: Vector3<f64>,
    pub mean: [f64; 2],
    /// Inverse of the dilated 2D covariance as `(a, b, c)` for
    /// `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    /// Half-widths of the box containing every pixel where the splat can
    /// reach `alpha_min`.
    pub extent: [f64; 2],
    /// Smallest exponent that can still reach `alpha_min`.
    pub power_cut: f64,
    /// Contributions below this alpha are skipped.
    pub alpha_min: f64,
}

/// Projects a splat for rasterization. Returns `None` when it is culled by
/// the near plane or its opacity can never reach `alpha_min`.
pub(crate) fn project_splat(camera: &Camera, splat: &Splat, index: usize, alpha_min: f64) -> Option<Projection> {
    let opacity = sigmoid(splat.opacity_logit);
    if opacity < alpha_min {
        return None;
    }
    let sigma = covariance3d(&splat.linear, &splat.scale);
    let (mean, cov, depth) = project_gaussian(camera, &splat.position, &sigma)?;
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    if !(det > 0.0) || !mean.iter().all(|v| v.is_finite()) {
        return None;
    }
    let inv = 1.0 / det;
    let conic = [cov[(1, 1)] * inv, -cov[(0, 1)] * inv, cov[(0, 0)] * inv];
    // alpha >= alpha_min  <=>  dᵀ Q d <= 2 ln(opacity / alpha_min)
    let reach = 2.0 * (opacity / alpha_min).ln();
    let extent = [(reach * cov[(0, 0)]).sqrt(), (reach * cov[(1, 1)]).sqrt()];
    let t = camera.rotation() * splat.position + camera.translation();
    Some(Projection {
        index: index as u32,
        cam: t,
        mean: [mean.x, mean.y],
        conic,
        depth,
        opacity,
        color: splat.color,
        extent,
        power_cut: (alpha_min / opacity).ln(),
        alpha_min,
    })
}

/// Result of evaluating one splat at one pixel.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Fragment {
    pub alpha: f64,
    pub dx: f64,
    pub dy: f64,
    /// Unclipped `opacity * exp(power)` exceeded the cap.
    pub capped: bool,
    /// `exp(power)`.
    pub falloff: f64,
}

#[inline(always)]
pub(crate) fn evaluate(p: &Projection, px: f64, py: f64) -> Option<Fragment> {
    let dx = px - p.mean[0];
    let dy = py - p.mean[1];
    let [a, b, c] = p.conic;
    let power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy;
    if power < p.power_cut - 1e-9 {
        return None;
    }
    let falloff = power.exp();
    let raw = p.opacity * falloff;
    let (alpha, capped) = if raw > ALPHA_CAP {
        (ALPHA_CAP, true)
    } else {
        (raw, false)
    };
    if alpha < p.alpha_min {
        return None;
    }
    Some(Fragment {
        alpha,
        dx,
        dy,
        capped,
        falloff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Matrix4;

    fn camera(fx: f64) -> Camera {
        Camera::new(fx, fx, 0.0, 0.0, 64, 64, Matrix4::identity()).unwrap()
    }

    #[test]
    fn covariance_identity_rotation() {
        let s = covariance3d(&Matrix3::identity(), &Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(s, Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 9.0)));
    }

    #[test]
    fn covariance_quarter_turn_about_z() {
        let r = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let s = covariance3d(&r, &Vector3::new(1.0, 2.0, 3.0));
        // R diag(1,4,9) Rᵀ computed entrywise
        let mut expect = Matrix3::zeros();
        let d = [1.0, 4.0, 9.0];
        for i in 0..3 {
            for j in 0..3 {
                expect[(i, j)] = (0..3).map(|k| r[(i, k)] * d[k] * r[(j, k)]).sum();
            }
        }
        assert_eq!(expect, Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 9.0)));
        assert_relative_eq!(s, expect, epsilon = 1e-15);
    }

    #[test]
    fn projection_on_axis() {
        let (mean, cov, depth) =
            project_gaussian(&camera(100.0), &Vector3::new(0.0, 0.0, 5.0), &Matrix3::identity()).unwrap();
        assert_eq!(depth, 5.0);
        assert_eq!(mean, Vector2::new(0.0, 0.0));
        assert_relative_eq!(cov, Matrix2::identity() * 400.3, epsilon = 1e-9);
    }

    #[test]
    fn tiny_gaussian_projects_to_dilation_floor() {
        let sigma = covariance3d(&Matrix3::identity(), &Vector3::repeat(1e-6));
        let (_, cov, _) = project_gaussian(&camera(100.0), &Vector3::new(0.0, 0.0, 5.0), &sigma).unwrap();
        assert_relative_eq!(cov, Matrix2::identity() * 0.3, epsilon = 1e-9);
    }

    #[test]
    fn behind_camera_is_culled() {
        assert!(project_gaussian(&camera(100.0), &Vector3::new(0.0, 0.0, -1.0), &Matrix3::identity()).is_none());
    }

    #[test]
    fn alpha_examples() {
        let m = Vector2::new(3.0, 4.0);
        let i = Matrix2::identity();
        assert_eq!(alpha_at(&m, &m, &i, 0.0), 0.5);
        assert_eq!(alpha_at(&m, &m, &i, -30.0), 0.0);
        assert!(sigmoid(-30.0) <= 1e-13);
        let x = m + Vector2::new(1.0, 1.0);
        assert_relative_eq!(alpha_at(&x, &m, &i, 0.0), 0.5 * (-1.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn extent_bounds_the_visible_region() {
        let splat = Splat {
            position: Vector3::new(0.2, -0.1, 3.0),
            linear: Matrix3::new(0.9, 0.3, 0.0, -0.2, 1.1, 0.4, 0.1, 0.0, 0.8),
            scale: Vector3::new(0.05, 0.2, 0.1),
            opacity_logit: 1.5,
            color: [1.0; 3],
        };
        let cam = camera(80.0);
        let p = project_splat(&cam, &splat, 0, ALPHA_MIN).unwrap();
        for iy in -80..80 {
            for ix in -80..80 {
                let (x, y) = (ix as f64 * 0.5, iy as f64 * 0.5);
                if evaluate(&p, x, y).is_some() {
                    assert!((x - p.mean[0]).abs() <= p.extent[0]);
                    assert!((y - p.mean[1]).abs() <= p.extent[1]);
                }
            }
        }
    }
}
