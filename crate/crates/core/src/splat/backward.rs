use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;

use super::project::{covariance3d, evaluate};
use super::raster::{render_tiled_retained, Binned, ForwardPass, TileState};
use super::{Camera, Reduction, RenderOptions, SplatScene};
use crate::error::{Error, Result};
use crate::image::FloatImage;

/// Gradients of a scalar loss with respect to every splat parameter. Culled
/// splats get zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGradients {
    pub position: Vec<Vector3<f64>>,
    pub linear: Vec<Matrix3<f64>>,
    pub scale: Vec<Vector3<f64>>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

impl SceneGradients {
    pub fn zeros(n: usize) -> Self {
        SceneGradients {
            position: vec![Vector3::zeros(); n],
            linear: vec![Matrix3::zeros(); n],
            scale: vec![Vector3::zeros(); n],
            opacity_logit: vec![0.0; n],
            color: vec![[0.0; 3]; n],
        }
    }
}

/// Screen-space gradient of one splat: mean, conic entries `(Q00, Q01, Q11)`
/// as matrix entries, opacity and color.
#[derive(Debug, Clone, Copy, Default)]
struct Grad2d {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

impl Grad2d {
    fn add(&mut self, o: &Grad2d) {
        for i in 0..2 {
            self.mean[i] += o.mean[i];
        }
        for i in 0..3 {
            self.conic[i] += o.conic[i];
            self.color[i] += o.color[i];
        }
        self.opacity += o.opacity;
    }
}

/// Backpropagates `d_image` (dL/d pixel color, 3 channels) through the tiled
/// renderer with the same options used for the forward pass.
pub fn render_backward(
    scene: &SplatScene,
    camera: &Camera,
    background: [f64; 3],
    options: &RenderOptions,
    d_image: &FloatImage,
) -> Result<SceneGradients> {
    let (_, pass) = render_tiled_retained(scene, camera, background, options);
    render_backward_retained(&pass, scene, camera, d_image)
}

/// Backward pass reusing the state of the forward pass that rendered
/// `scene` from `camera`.
pub fn render_backward_retained(
    pass: &ForwardPass,
    scene: &SplatScene,
    camera: &Camera,
    d_image: &FloatImage,
) -> Result<SceneGradients> {
    if d_image.width != camera.width || d_image.height != camera.height || d_image.channels != 3 {
        return Err(Error::mismatch(
            "image gradient shape",
            camera.width * camera.height * 3,
            d_image.width * d_image.height * d_image.channels,
        ));
    }
    if pass.size != (camera.width, camera.height) {
        return Err(Error::InvalidArgument(
            "forward pass was rendered for a different camera".into(),
        ));
    }
    let binned = &pass.binned;
    let options = &pass.options;
    let background = pass.background;
    let visible = binned.sorted.proj.len();
    let tiles = 0..binned.tiles_x * binned.tiles_y;
    let tile_grads = |t: usize| tile_backward(binned, &pass.tiles[t], t, background, d_image);

    let grads2d: Vec<Grad2d> = match options.reduction {
        Reduction::Strict => {
            let per_tile: Vec<Vec<(u32, Grad2d)>> = tiles.into_par_iter().map(tile_grads).collect();
            let mut acc = vec![Grad2d::default(); visible];
            for list in per_tile {
                for (rank, g) in list {
                    acc[rank as usize].add(&g);
                }
            }
            acc
        }
        Reduction::Parallel => tiles
            .into_par_iter()
            .fold(
                || vec![Grad2d::default(); visible],
                |mut acc, t| {
                    for (rank, g) in tile_grads(t) {
                        acc[rank as usize].add(&g);
                    }
                    acc
                },
            )
            .reduce(
                || vec![Grad2d::default(); visible],
                |mut a, b| {
                    for (x, y) in a.iter_mut().zip(&b) {
                        x.add(y);
                    }
                    a
                },
            ),
    };

    let per_splat: Vec<_> = binned
        .sorted
        .proj
        .par_iter()
        .zip(grads2d.par_iter())
        .map(|(p, g)| (p.index as usize, splat_backward(scene, camera, p, g)))
        .collect();
    let mut out = SceneGradients::zeros(scene.len());
    for (i, (dpos, dlin, dscale, dlogit, dcolor)) in per_splat {
        out.position[i] = dpos;
        out.linear[i] = dlin;
        out.scale[i] = dscale;
        out.opacity_logit[i] = dlogit;
        out.color[i] = dcolor;
    }
    Ok(out)
}

fn tile_backward(
    binned: &Binned,
    st: &TileState,
    t: usize,
    background: [f64; 3],
    d_image: &FloatImage,
) -> Vec<(u32, Grad2d)> {
    let [x0, x1, y0, y1] = st.bounds;
    let tw = x1 - x0;
    let n = tw * (y1 - y0);
    let mut trans = st.transmittance.clone();
    let mut behind: Vec<[f64; 3]> = vec![background; n];
    let (lo, hi) = binned.ranges[t];
    let mut out = Vec::with_capacity(hi - lo);

    for k in (0..hi - lo).rev() {
        let rank = binned.entries[lo + k];
        let p = &binned.sorted.proj[rank as usize];
        let r = &binned.sorted.rects[rank as usize];
        let mut g = Grad2d::default();
        let mut touched = false;
        for y in r[2].max(y0)..=r[3].min(y1 - 1) {
            for x in r[0].max(x0)..=r[1].min(x1 - 1) {
                let li = (y - y0) * tw + (x - x0);
                if st.count[li] == 0 || k as u32 > st.last[li] {
                    continue;
                }
                let Some(f) = evaluate(p, x as f64, y as f64) else {
                    continue;
                };
                touched = true;
                let dl = d_image.pixel(x, y);
                let t_before = trans[li] / (1.0 - f.alpha);
                let b = &mut behind[li];
                let mut d_alpha = 0.0;
                for ch in 0..3 {
                    g.color[ch] += f.alpha * t_before * dl[ch];
                    d_alpha += dl[ch] * (p.color[ch] - b[ch]);
                    b[ch] = f.alpha * p.color[ch] + (1.0 - f.alpha) * b[ch];
                }
                d_alpha *= t_before;
                trans[li] = t_before;
                if f.capped {
                    continue;
                }
                g.opacity += d_alpha * f.falloff;
                let d_power = d_alpha * f.alpha;
                let [a, bq, c] = p.conic;
                g.mean[0] += d_power * (a * f.dx + bq * f.dy);
                g.mean[1] += d_power * (bq * f.dx + c * f.dy);
                g.conic[0] += -0.5 * d_power * f.dx * f.dx;
                g.conic[1] += -0.5 * d_power * f.dx * f.dy;
                g.conic[2] += -0.5 * d_power * f.dy * f.dy;
            }
        }
        if touched {
            out.push((rank, g));
        }
    }
    out
}

type SplatGrad = (Vector3<f64>, Matrix3<f64>, Vector3<f64>, f64, [f64; 3]);

fn splat_backward(scene: &SplatScene, camera: &Camera, p: &super::Projection, g: &Grad2d) -> SplatGrad {
    let splat = &scene.splats[p.index as usize];
    let d_logit = g.opacity * p.opacity * (1.0 - p.opacity);

    let q = Matrix2::new(p.conic[0], p.conic[1], p.conic[1], p.conic[2]);
    let g_q = Matrix2::new(g.conic[0], g.conic[1], g.conic[1], g.conic[2]);
    let g_cov2 = -(q * g_q * q);

    let rw = camera.rotation();
    let t = p.cam;
    let (fx, fy) = (camera.fx, camera.fy);
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let j = Matrix2x3::new(fx * iz, 0.0, -fx * t.x * iz2, 0.0, fy * iz, -fy * t.y * iz2);
    let jw = j * rw;
    let sigma = covariance3d(&splat.linear, &splat.scale);

    let g_sigma = jw.transpose() * g_cov2 * jw;
    let g_jw = 2.0 * g_cov2 * jw * sigma;
    let g_j = g_jw * rw.transpose();

    let mut g_t = Vector3::new(
        g_j[(0, 2)] * (-fx * iz2),
        g_j[(1, 2)] * (-fy * iz2),
        g_j[(0, 0)] * (-fx * iz2)
            + g_j[(0, 2)] * (2.0 * fx * t.x * iz2 * iz)
            + g_j[(1, 1)] * (-fy * iz2)
            + g_j[(1, 2)] * (2.0 * fy * t.y * iz2 * iz),
    );
    g_t.x += g.mean[0] * fx * iz;
    g_t.y += g.mean[1] * fy * iz;
    g_t.z += -g.mean[0] * fx * t.x * iz2 - g.mean[1] * fy * t.y * iz2;
    let d_pos = rw.transpose() * g_t;

    let m = splat.linear * Matrix3::from_diagonal(&splat.scale);
    let g_m = 2.0 * g_sigma * m;
    let mut d_lin = Matrix3::zeros();
    let mut d_scale = Vector3::zeros();
    for i in 0..3 {
        for jj in 0..3 {
            d_lin[(i, jj)] = g_m[(i, jj)] * splat.scale[jj];
            d_scale[jj] += g_m[(i, jj)] * splat.linear[(i, jj)];
        }
    }
    (d_pos, d_lin, d_scale, d_logit, g.color)
}

#[cfg(test)]
mod tests {
    use super::super::{render_tiled, Splat};
    use super::*;
    use nalgebra::Matrix4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scene(rng: &mut ChaCha8Rng, n: usize) -> SplatScene {
        SplatScene {
            splats: (0..n)
                .map(|_| Splat {
                    position: Vector3::new(
                        rng.gen_range(-0.6..0.6),
                        rng.gen_range(-0.6..0.6),
                        rng.gen_range(2.0..4.0),
                    ),
                    linear: Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0)),
                    scale: Vector3::from_fn(|_, _| rng.gen_range(0.05..0.25)),
                    opacity_logit: rng.gen_range(-1.0..1.5),
                    color: [rng.gen(), rng.gen(), rng.gen()],
                })
                .collect(),
        }
    }

    fn loss(scene: &SplatScene, cam: &Camera, w: &FloatImage) -> f64 {
        let img = render_tiled(scene, cam, [0.2, 0.1, 0.3], &RenderOptions::gradient_check());
        img.color.data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cam = Camera::new(40.0, 40.0, 16.0, 16.0, 32, 32, Matrix4::identity()).unwrap();
        let sc = scene(&mut rng, 6);
        let mut w = FloatImage::new(32, 32, 3);
        w.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let g = render_backward(&sc, &cam, [0.2, 0.1, 0.3], &RenderOptions::gradient_check(), &w).unwrap();
        let h = 1e-5;
        let check = |analytic: f64, f: &dyn Fn(&mut Splat, f64)| {
            let (mut a, mut b) = (sc.clone(), sc.clone());
            f(&mut a.splats[0], h);
            f(&mut b.splats[0], -h);
            let fd = (loss(&a, &cam, &w) - loss(&b, &cam, &w)) / (2.0 * h);
            assert!(
                (fd - analytic).abs() <= 1e-4 * fd.abs().max(1.0),
                "fd {fd} analytic {analytic}"
            );
        };
        for k in 0..3 {
            check(g.position[0][k], &|s, d| s.position[k] += d);
            check(g.scale[0][k], &|s, d| s.scale[k] += d);
            check(g.color[0][k], &|s, d| s.color[k] += d);
            for c in 0..3 {
                check(g.linear[0][(k, c)], &|s, d| s.linear[(k, c)] += d);
            }
        }
        check(g.opacity_logit[0], &|s, d| s.opacity_logit += d);
    }

    #[test]
    fn reductions_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cam = Camera::new(40.0, 40.0, 16.0, 16.0, 32, 32, Matrix4::identity()).unwrap();
        let sc = scene(&mut rng, 20);
        let w = FloatImage::filled(32, 32, &[1.0, -0.5, 0.25]);
        let strict = render_backward(&sc, &cam, [0.0; 3], &RenderOptions::default(), &w).unwrap();
        let opts = RenderOptions {
            reduction: Reduction::Parallel,
            ..Default::default()
        };
        let par = render_backward(&sc, &cam, [0.0; 3], &opts, &w).unwrap();
        for i in 0..sc.len() {
            assert!((strict.position[i] - par.position[i]).norm() < 1e-9);
            assert!((strict.opacity_logit[i] - par.opacity_logit[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_wrong_gradient_shape() {
        let cam = Camera::new(40.0, 40.0, 16.0, 16.0, 32, 32, Matrix4::identity()).unwrap();
        let w = FloatImage::new(16, 32, 3);
        assert!(render_backward(&SplatScene::default(), &cam, [0.0; 3], &RenderOptions::default(), &w).is_err());
    }
}
