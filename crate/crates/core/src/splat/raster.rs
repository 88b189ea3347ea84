use rayon::prelude::*;

use super::project::{evaluate, project_splat, Projection};
use super::{Camera, RenderOptions, SplatScene};
use crate::image::FloatImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BinStats {
    /// Splats surviving near-plane and opacity culling.
    pub visible: usize,
    /// (splat, tile) pairs after binning.
    pub binned: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderTarget {
    pub color: FloatImage,
    /// Transmittance left after the last blended splat, per pixel.
    pub transmittance: Vec<f64>,
    /// Number of splats blended into each pixel.
    pub contributors: Vec<u32>,
    pub stats: BinStats,
}

impl RenderTarget {
    fn blank(width: usize, height: usize) -> Self {
        RenderTarget {
            color: FloatImage::new(width, height, 3),
            transmittance: vec![1.0; width * height],
            contributors: vec![0; width * height],
            stats: BinStats::default(),
        }
    }
}

/// Visible splats sorted front to back, with inclusive pixel rectangles.
pub(crate) struct Sorted {
    pub proj: Vec<Projection>,
    pub rects: Vec<[usize; 4]>,
}

pub(crate) fn project_and_sort(scene: &SplatScene, camera: &Camera, alpha_min: f64) -> Sorted {
    let mut proj: Vec<Projection> = scene
        .splats
        .par_iter()
        .enumerate()
        .filter_map(|(i, s)| project_splat(camera, s, i, alpha_min))
        .collect();
    proj.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    let w = camera.width as f64;
    let h = camera.height as f64;
    let (proj, rects) = proj
        .into_iter()
        .filter_map(|p| {
            // one pixel of slack on each side of the exact extent
            let x0 = (p.mean[0] - p.extent[0]).ceil() - 1.0;
            let x1 = (p.mean[0] + p.extent[0]).floor() + 1.0;
            let y0 = (p.mean[1] - p.extent[1]).ceil() - 1.0;
            let y1 = (p.mean[1] + p.extent[1]).floor() + 1.0;
            if x1 < 0.0 || y1 < 0.0 || x0 > w - 1.0 || y0 > h - 1.0 {
                return None;
            }
            let rect = [
                x0.max(0.0) as usize,
                x1.min(w - 1.0) as usize,
                y0.max(0.0) as usize,
                y1.min(h - 1.0) as usize,
            ];
            Some((p, rect))
        })
        .unzip();
    Sorted { proj, rects }
}

/// Splats binned to screen tiles; within a tile, entries are front to back.
pub(crate) struct Binned {
    pub sorted: Sorted,
    pub tile: usize,
    pub tiles_x: usize,
    pub tiles_y: usize,
    pub ranges: Vec<(usize, usize)>,
    pub entries: Vec<u32>,
}

pub(crate) fn bin(scene: &SplatScene, camera: &Camera, tile: usize, alpha_min: f64) -> Binned {
    let sorted = project_and_sort(scene, camera, alpha_min);
    let tiles_x = camera.width.div_ceil(tile);
    let tiles_y = camera.height.div_ceil(tile);
    let mut keys: Vec<u64> = Vec::new();
    for (rank, r) in sorted.rects.iter().enumerate() {
        for ty in r[2] / tile..=r[3] / tile {
            for tx in r[0] / tile..=r[1] / tile {
                keys.push(((ty * tiles_x + tx) as u64) << 32 | rank as u64);
            }
        }
    }
    keys.par_sort_unstable();
    let mut ranges = vec![(0, 0); tiles_x * tiles_y];
    let mut start = 0;
    while start < keys.len() {
        let t = (keys[start] >> 32) as usize;
        let mut end = start;
        while end < keys.len() && (keys[end] >> 32) as usize == t {
            end += 1;
        }
        ranges[t] = (start, end);
        start = end;
    }
    let entries = keys.iter().map(|k| *k as u32).collect();
    Binned {
        sorted,
        tile,
        tiles_x,
        tiles_y,
        ranges,
        entries,
    }
}

impl Binned {
    /// Pixel bounds `[x0, x1) x [y0, y1)` of a tile.
    pub fn tile_bounds(&self, t: usize, camera: &Camera) -> [usize; 4] {
        let (tx, ty) = (t % self.tiles_x, t / self.tiles_x);
        [
            tx * self.tile,
            ((tx + 1) * self.tile).min(camera.width),
            ty * self.tile,
            ((ty + 1) * self.tile).min(camera.height),
        ]
    }
}

/// Per-pixel blend state of one tile after the forward pass.
pub(crate) struct TileState {
    pub bounds: [usize; 4],
    pub color: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub count: Vec<u32>,
    /// Position in the tile's entry list of the last blended splat.
    pub last: Vec<u32>,
}

pub(crate) fn blend_tile(binned: &Binned, t: usize, camera: &Camera, early_stop: Option<f64>) -> TileState {
    let bounds = binned.tile_bounds(t, camera);
    let [x0, x1, y0, y1] = bounds;
    let tw = x1 - x0;
    let n = tw * (y1 - y0);
    let mut st = TileState {
        bounds,
        color: vec![0.0; 3 * n],
        transmittance: vec![1.0; n],
        count: vec![0; n],
        last: vec![0; n],
    };
    let mut done = vec![false; n];
    let mut active = n;
    let (lo, hi) = binned.ranges[t];
    for (k, &rank) in binned.entries[lo..hi].iter().enumerate() {
        let p = &binned.sorted.proj[rank as usize];
        let r = &binned.sorted.rects[rank as usize];
        for y in r[2].max(y0)..=r[3].min(y1 - 1) {
            for x in r[0].max(x0)..=r[1].min(x1 - 1) {
                let li = (y - y0) * tw + (x - x0);
                if done[li] {
                    continue;
                }
                let Some(f) = evaluate(p, x as f64, y as f64) else {
                    continue;
                };
                let t_now = st.transmittance[li];
                let next = t_now * (1.0 - f.alpha);
                if let Some(eps) = early_stop {
                    if next < eps {
                        done[li] = true;
                        active -= 1;
                        continue;
                    }
                }
                let c = &mut st.color[3 * li..3 * li + 3];
                for ch in 0..3 {
                    c[ch] += p.color[ch] * f.alpha * t_now;
                }
                st.transmittance[li] = next;
                st.count[li] += 1;
                st.last[li] = k as u32;
            }
        }
        if active == 0 {
            break;
        }
    }
    st
}

/// Binning and per-tile blend state kept from a forward pass so the
/// backward pass does not have to blend again.
pub struct ForwardPass {
    pub(crate) binned: Binned,
    pub(crate) tiles: Vec<TileState>,
    pub(crate) background: [f64; 3],
    pub(crate) options: RenderOptions,
    pub(crate) size: (usize, usize),
}

/// Tile-based renderer: cull, bin splats to the tiles their footprint
/// overlaps, sort by (tile, depth), then blend each tile front to back.
pub fn render_tiled(
    scene: &SplatScene,
    camera: &Camera,
    background: [f64; 3],
    options: &RenderOptions,
) -> RenderTarget {
    render_tiled_retained(scene, camera, background, options).0
}

/// [`render_tiled`] that also returns the state needed by
/// [`super::render_backward_retained`].
pub fn render_tiled_retained(
    scene: &SplatScene,
    camera: &Camera,
    background: [f64; 3],
    options: &RenderOptions,
) -> (RenderTarget, ForwardPass) {
    let binned = bin(scene, camera, options.tile_size.max(1), options.alpha_min);
    let tiles: Vec<TileState> = (0..binned.tiles_x * binned.tiles_y)
        .into_par_iter()
        .map(|t| blend_tile(&binned, t, camera, options.early_stop))
        .collect();

    let mut out = RenderTarget::blank(camera.width, camera.height);
    for st in &tiles {
        let [x0, x1, y0, y1] = st.bounds;
        let tw = x1 - x0;
        for y in y0..y1 {
            for x in x0..x1 {
                let li = (y - y0) * tw + (x - x0);
                let gi = y * camera.width + x;
                let t = st.transmittance[li];
                for ch in 0..3 {
                    out.color.data[3 * gi + ch] = st.color[3 * li + ch] + t * background[ch];
                }
                out.transmittance[gi] = t;
                out.contributors[gi] = st.count[li];
            }
        }
    }
    out.stats = BinStats {
        visible: binned.sorted.proj.len(),
        binned: binned.entries.len(),
    };
    let pass = ForwardPass {
        binned,
        tiles,
        background,
        options: *options,
        size: (camera.width, camera.height),
    };
    (out, pass)
}

/// Reference renderer: every pixel walks every visible splat in depth order.
pub fn render_brute(
    scene: &SplatScene,
    camera: &Camera,
    background: [f64; 3],
    options: &RenderOptions,
) -> RenderTarget {
    let mut proj: Vec<Projection> = scene
        .splats
        .iter()
        .enumerate()
        .filter_map(|(i, s)| project_splat(camera, s, i, options.alpha_min))
        .collect();
    proj.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));

    let w = camera.width;
    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<u32>)> = (0..camera.height)
        .into_par_iter()
        .map(|y| {
            let mut color = vec![0.0; 3 * w];
            let mut trans = vec![1.0; w];
            let mut count = vec![0; w];
            for x in 0..w {
                let mut t_now = 1.0;
                let c = &mut color[3 * x..3 * x + 3];
                for p in &proj {
                    let Some(f) = evaluate(p, x as f64, y as f64) else {
                        continue;
                    };
                    let next = t_now * (1.0 - f.alpha);
                    if let Some(eps) = options.early_stop {
                        if next < eps {
                            break;
                        }
                    }
                    for ch in 0..3 {
                        c[ch] += p.color[ch] * f.alpha * t_now;
                    }
                    t_now = next;
                    count[x] += 1;
                }
                for ch in 0..3 {
                    c[ch] += t_now * background[ch];
                }
                trans[x] = t_now;
            }
            (color, trans, count)
        })
        .collect();

    let mut out = RenderTarget::blank(w, camera.height);
    for (y, (color, trans, count)) in rows.into_iter().enumerate() {
        out.color.data[3 * y * w..3 * (y + 1) * w].copy_from_slice(&color);
        out.transmittance[y * w..(y + 1) * w].copy_from_slice(&trans);
        out.contributors[y * w..(y + 1) * w].copy_from_slice(&count);
    }
    out.stats.visible = proj.len();
    out
}

#[cfg(test)]
mod tests {
    use super::super::{Splat, ALPHA_CAP};
    use super::*;
    use nalgebra::{Matrix3, Matrix4, Vector3};

    fn camera(size: usize) -> Camera {
        Camera::new(
            size as f64,
            size as f64,
            0.5 * size as f64,
            0.5 * size as f64,
            size,
            size,
            Matrix4::identity(),
        )
        .unwrap()
    }

    fn big_splat(z: f64, logit: f64, color: [f64; 3]) -> Splat {
        Splat {
            position: Vector3::new(0.0, 0.0, z),
            linear: Matrix3::identity(),
            scale: Vector3::repeat(10.0),
            opacity_logit: logit,
            color,
        }
    }

    #[test]
    fn empty_scene_is_background() {
        let bg = [0.1, 0.2, 0.3];
        for img in [
            render_brute(&SplatScene::default(), &camera(32), bg, &RenderOptions::default()),
            render_tiled(&SplatScene::default(), &camera(32), bg, &RenderOptions::default()),
        ] {
            assert!(img.color.data.chunks(3).all(|c| c == bg));
            assert!(img.transmittance.iter().all(|&t| t == 1.0));
        }
    }

    #[test]
    fn two_half_alpha_splats_blend_front_to_back() {
        // huge footprint: the falloff at the mean pixel is exp(0) = 1
        let scene = SplatScene {
            splats: vec![
                big_splat(5.0, 0.0, [1.0, 0.0, 0.0]),
                big_splat(6.0, 0.0, [0.0, 0.0, 1.0]),
            ],
        };
        let cam = camera(32);
        for img in [
            render_brute(&scene, &cam, [0.0; 3], &RenderOptions::default()),
            render_tiled(&scene, &cam, [0.0; 3], &RenderOptions::default()),
        ] {
            let c = img.color.pixel(16, 16);
            assert_eq!(c, &[0.5, 0.0, 0.25]);
        }
    }

    #[test]
    fn opaque_splat_is_capped() {
        let scene = SplatScene {
            splats: vec![big_splat(5.0, 30.0, [0.2, 0.4, 0.8])],
        };
        let bg = [1.0, 1.0, 1.0];
        let img = render_tiled(&scene, &camera(32), bg, &RenderOptions::default());
        let c = img.color.pixel(16, 16);
        for ch in 0..3 {
            let expect = ALPHA_CAP * scene.splats[0].color[ch] + (1.0 - ALPHA_CAP) * bg[ch];
            assert!((c[ch] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn scene_behind_camera_bins_nothing() {
        let scene = SplatScene {
            splats: vec![big_splat(-5.0, 3.0, [1.0; 3])],
        };
        let img = render_tiled(&scene, &camera(32), [0.0; 3], &RenderOptions::default());
        assert_eq!(img.stats.binned, 0);
        assert!(img.color.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn splat_on_tile_boundary_matches_reference() {
        let cam = camera(32);
        let scene = SplatScene {
            splats: vec![Splat {
                // mean lands exactly on the x = 16 tile boundary
                position: Vector3::new(0.0, 0.1, 2.0),
                linear: Matrix3::identity(),
                scale: Vector3::repeat(0.08),
                opacity_logit: 2.0,
                color: [0.3, 0.9, 0.5],
            }],
        };
        let tiled = render_tiled(&scene, &cam, [0.0; 3], &RenderOptions::default());
        let brute = render_brute(&scene, &cam, [0.0; 3], &RenderOptions::default());
        assert!(tiled.stats.binned >= 2);
        assert_eq!(tiled.color, brute.color);
        // both sides of the seam are lit
        assert!(tiled.color.pixel(15, 17)[1] > 0.1 && tiled.color.pixel(16, 17)[1] > 0.1);
    }
}
