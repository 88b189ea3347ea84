//! Gaussian parameter maps laid out on a mesh UV atlas.
//!
//! Every valid texel of a [`GaussianMapSet`] is one Gaussian. Base channels
//! come from rasterizing the canonical mesh into UV space; correction
//! channels are added on top in canonical space before skinning.

use log::warn;
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{canonical_sign, matrix_to_quat, quat_norm, Quat, IDENTITY_QUAT};
use crate::mesh::{SkinnedMesh, MAX_INFLUENCES};

/// Smallest scale used anywhere a scale feeds a covariance.
pub const MIN_SCALE: f64 = 1e-6;
const EDGE_EPS: f64 = 1e-12;
const DEGENERATE_NORMAL: f64 = 1e-12;
pub(crate) const DEGENERATE_QUAT: f64 = 1e-8;

/// Up to four `(joint, weight)` influences; unused slots have weight 0.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Influences {
    pub joints: [u32; MAX_INFLUENCES],
    pub weights: [f64; MAX_INFLUENCES],
}

impl Influences {
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.joints
            .iter()
            .zip(&self.weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|(&j, &w)| (j as usize, w))
    }

    /// Keeps the four largest weights (ties by lower joint index) and
    /// renormalises them to sum to one.
    pub fn from_dense(pairs: &[(usize, f64)]) -> Self {
        let mut sorted: Vec<(usize, f64)> = pairs.iter().copied().filter(|p| p.1 > 0.0).collect();
        sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        sorted.truncate(MAX_INFLUENCES);
        let total: f64 = sorted.iter().map(|p| p.1).sum();
        let mut out = Influences::default();
        for (slot, (j, w)) in sorted.into_iter().enumerate() {
            out.joints[slot] = j as u32;
            out.weights[slot] = w / total;
        }
        out
    }

    pub fn weight_of(&self, joint: usize) -> f64 {
        self.iter().filter(|p| p.0 == joint).map(|p| p.1).sum()
    }
}

/// Which triangle covers each texel, with the barycentric coordinates of the
/// texel centre. Only kept in memory; it is not part of the container.
#[derive(Debug, Clone, PartialEq)]
pub struct Coverage {
    pub triangle: Vec<Option<u32>>,
    pub barycentric: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMapSet {
    pub width: usize,
    pub height: usize,
    pub valid: Vec<bool>,
    pub base_position: Vec<f64>,
    pub base_rotation: Vec<f64>,
    pub base_scale: Vec<f64>,
    pub opacity_logit: Vec<f64>,
    pub color: Vec<f64>,
    pub skin: Vec<Influences>,
    pub delta_position: Vec<f64>,
    pub delta_rotation: Vec<f64>,
    pub delta_scale: Vec<f64>,
    pub coverage: Option<Coverage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RasterStats {
    pub valid_pixels: usize,
    /// Texel centres strictly inside more than one triangle.
    pub overlaps: usize,
}

impl GaussianMapSet {
    pub fn empty(width: usize, height: usize) -> Self {
        let n = width * height;
        GaussianMapSet {
            width,
            height,
            valid: vec![false; n],
            base_position: vec![0.0; 3 * n],
            base_rotation: vec![0.0; 4 * n],
            base_scale: vec![0.0; 3 * n],
            opacity_logit: vec![0.0; n],
            color: vec![0.0; 3 * n],
            skin: vec![Influences::default(); n],
            delta_position: vec![0.0; 3 * n],
            delta_rotation: vec![0.0; 4 * n],
            delta_scale: vec![0.0; 3 * n],
            coverage: None,
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Indices of valid texels in row-major order; this is the Gaussian order
    /// used throughout the engine.
    pub fn valid_indices(&self) -> Vec<usize> {
        (0..self.pixel_count()).filter(|&i| self.valid[i]).collect()
    }

    pub fn position(&self, i: usize) -> Vector3<f64> {
        Vector3::new(
            self.base_position[3 * i],
            self.base_position[3 * i + 1],
            self.base_position[3 * i + 2],
        )
    }

    pub fn rotation(&self, i: usize) -> Quat {
        let r = &self.base_rotation[4 * i..4 * i + 4];
        [r[0], r[1], r[2], r[3]]
    }

    /// Corrected canonical parameters from this map set's own correction
    /// channels.
    pub fn apply_corrections(&self) -> CorrectedParams {
        apply_corrections_with(self, &self.delta_position, &self.delta_rotation, &self.delta_scale)
    }
}

/// Rasterizes the mesh into a `resolution x resolution` UV grid.
///
/// Texel `(x, y)` has its centre at `((x + 0.5) / r, (y + 0.5) / r)` in UV,
/// with row 0 at `v = 0`. Coverage is inclusive of triangle edges and the
/// lowest triangle index wins when several triangles contain a centre.
pub fn rasterize_uv(mesh: &SkinnedMesh, resolution: usize) -> Result<(GaussianMapSet, RasterStats)> {
    if resolution < 8 {
        return Err(Error::InvalidArgument(format!(
            "UV resolution must be at least 8, got {resolution}"
        )));
    }
    mesh.validate(None)?;

    let r = resolution;
    let n = r * r;
    let mut owner: Vec<Option<u32>> = vec![None; n];
    let mut bary = vec![[0.0; 3]; n];
    let mut overlaps = 0;

    for (t, uv) in mesh.uv_coords.iter().enumerate() {
        let (min_u, max_u) = min_max(uv.iter().map(|c| c[0]));
        let (min_v, max_v) = min_max(uv.iter().map(|c| c[1]));
        let x0 = texel_lo(min_u, r);
        let x1 = texel_hi(max_u, r);
        let y0 = texel_lo(min_v, r);
        let y1 = texel_hi(max_v, r);
        let area2 = 2.0 * crate::mesh::uv_area(uv);
        for y in y0..y1 {
            let pv = (y as f64 + 0.5) / r as f64;
            for x in x0..x1 {
                let pu = (x as f64 + 0.5) / r as f64;
                let b = barycentric(uv, area2, pu, pv);
                if b.iter().any(|&c| c < -EDGE_EPS) {
                    continue;
                }
                let i = y * r + x;
                match owner[i] {
                    None => {
                        owner[i] = Some(t as u32);
                        bary[i] = b;
                    }
                    Some(prev) => {
                        let strictly = b.iter().all(|&c| c > EDGE_EPS) && bary[i].iter().all(|&c| c > EDGE_EPS);
                        if strictly && prev != t as u32 {
                            overlaps += 1;
                        }
                    }
                }
            }
        }
    }
    if overlaps > 0 {
        warn!("{overlaps} UV texel centres are covered by overlapping triangles; lowest index kept");
    }

    let mut maps = GaussianMapSet::empty(r, r);
    for i in 0..n {
        let Some(t) = owner[i] else { continue };
        let tri = mesh.triangles[t as usize];
        let b = bary[i];
        maps.valid[i] = true;
        // offsets from the first corner keep constant attributes exact
        let v0 = mesh.vertices[tri[0]];
        let p = v0 + (mesh.vertices[tri[1]] - v0) * b[1] + (mesh.vertices[tri[2]] - v0) * b[2];
        maps.base_position[3 * i..3 * i + 3].copy_from_slice(p.as_slice());
        maps.base_rotation[4 * i..4 * i + 4].copy_from_slice(&IDENTITY_QUAT);
        maps.base_scale[3 * i..3 * i + 3].fill(MIN_SCALE);
        maps.color[3 * i..3 * i + 3].fill(0.5);

        let mut dense: Vec<(usize, f64)> = Vec::with_capacity(3 * MAX_INFLUENCES);
        for (corner, &bw) in tri.iter().zip(&b) {
            for &(j, w) in &mesh.skin_weights[*corner] {
                match dense.iter_mut().find(|e| e.0 == j) {
                    Some(e) => e.1 += bw * w,
                    None => dense.push((j, bw * w)),
                }
            }
        }
        maps.skin[i] = Influences::from_dense(&dense);
    }
    maps.coverage = Some(Coverage {
        triangle: owner,
        barycentric: bary,
    });

    let stats = RasterStats {
        valid_pixels: maps.valid_count(),
        overlaps,
    };
    Ok((maps, stats))
}

fn min_max(it: impl Iterator<Item = f64>) -> (f64, f64) {
    it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn texel_lo(c: f64, r: usize) -> usize {
    ((c * r as f64 - 0.5).floor().max(0.0) as usize).min(r)
}

fn texel_hi(c: f64, r: usize) -> usize {
    ((c * r as f64 - 0.5).ceil() as isize + 1).clamp(0, r as isize) as usize
}

fn barycentric(uv: &[[f64; 2]; 3], area2: f64, pu: f64, pv: f64) -> [f64; 3] {
    let edge = |a: [f64; 2], b: [f64; 2]| (b[0] - a[0]) * (pv - a[1]) - (b[1] - a[1]) * (pu - a[0]);
    let w0 = edge(uv[1], uv[2]) / area2;
    let w1 = edge(uv[2], uv[0]) / area2;
    let w2 = edge(uv[0], uv[1]) / area2;
    [w0, w1, w2]
}

/// Sets each valid texel's base rotation to the frame of its covering
/// triangle: first axis along the first edge, third along the normal.
/// Returns the number of degenerate triangles that fell back to identity.
pub fn init_base_rotation(maps: &mut GaussianMapSet, mesh: &SkinnedMesh) -> Result<usize> {
    let coverage = maps
        .coverage
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("map set has no triangle coverage; run rasterize_uv first".into()))?;
    let mut frames: Vec<Option<Option<Quat>>> = vec![None; mesh.triangles.len()];
    let mut fallback = 0;
    for i in 0..maps.width * maps.height {
        let Some(t) = coverage.triangle[i] else { continue };
        let t = t as usize;
        let frame = *frames[t].get_or_insert_with(|| triangle_frame(mesh, t));
        let q = match frame {
            Some(q) => q,
            None => IDENTITY_QUAT,
        };
        maps.base_rotation[4 * i..4 * i + 4].copy_from_slice(&q);
    }
    for f in frames.iter().flatten() {
        if f.is_none() {
            fallback += 1;
        }
    }
    if fallback > 0 {
        warn!("{fallback} degenerate triangles fell back to the identity rotation");
    }
    Ok(fallback)
}

/// Quaternion whose rotation matrix has columns (tangent, bitangent, normal).
fn triangle_frame(mesh: &SkinnedMesh, t: usize) -> Option<Quat> {
    let [a, b, c] = mesh.triangles[t];
    let e1 = mesh.vertices[b] - mesh.vertices[a];
    let e2 = mesh.vertices[c] - mesh.vertices[a];
    let n = e1.cross(&e2);
    if n.norm() < DEGENERATE_NORMAL || e1.norm() < DEGENERATE_NORMAL {
        return None;
    }
    let axis1 = e1.normalize();
    let axis3 = n.normalize();
    let axis2 = axis3.cross(&axis1);
    let frame = Matrix3::from_columns(&[axis1, axis2, axis3]);
    Some(matrix_to_quat(&frame))
}

/// Isotropic base scale: mean distance to the `k` nearest other valid base
/// positions, floored at [`MIN_SCALE`].
pub fn init_base_scale(maps: &mut GaussianMapSet, k: usize) -> Result<()> {
    let idx = maps.valid_indices();
    if k == 0 || idx.len() < k + 1 {
        return Err(Error::TooFewPoints {
            k,
            required: k + 1,
            found: idx.len(),
        });
    }
    let pts: Vec<[f64; 3]> = idx
        .iter()
        .map(|&i| {
            let p = &maps.base_position[3 * i..3 * i + 3];
            [p[0], p[1], p[2]]
        })
        .collect();
    let scales = knn_mean_distance(&pts, k);
    for (&i, s) in idx.iter().zip(scales) {
        maps.base_scale[3 * i..3 * i + 3].fill(s.max(MIN_SCALE));
    }
    Ok(())
}

/// Exact k-nearest-neighbour mean distance. Points are swept in x order and
/// the scan in each direction stops once the x gap alone exceeds the
/// current k-th best distance.
fn knn_mean_distance(pts: &[[f64; 3]], k: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.sort_by(|&a, &b| pts[a][0].total_cmp(&pts[b][0]).then(a.cmp(&b)));
    let sorted: Vec<[f64; 3]> = order.iter().map(|&i| pts[i]).collect();

    let per_sorted: Vec<f64> = (0..sorted.len())
        .into_par_iter()
        .map(|s| {
            let p = sorted[s];
            // k smallest squared distances, ascending
            let mut best = vec![f64::INFINITY; k];
            let consider = |q: &[f64; 3], best: &mut Vec<f64>| {
                let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                if d2 < best[k - 1] {
                    let pos = best.partition_point(|&b| b <= d2);
                    best.insert(pos, d2);
                    best.pop();
                }
            };
            for q in sorted[s + 1..].iter() {
                if (q[0] - p[0]).powi(2) > best[k - 1] {
                    break;
                }
                consider(q, &mut best);
            }
            for q in sorted[..s].iter().rev() {
                if (p[0] - q[0]).powi(2) > best[k - 1] {
                    break;
                }
                consider(q, &mut best);
            }
            best.iter().map(|d| d.sqrt()).sum::<f64>() / k as f64
        })
        .collect();

    let mut out = vec![0.0; pts.len()];
    for (s, &i) in order.iter().enumerate() {
        out[i] = per_sorted[s];
    }
    out
}

/// Canonical-space parameters of every texel after corrections, indexed like
/// the map (invalid texels are zero).
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectedParams {
    pub position: Vec<f64>,
    pub rotation: Vec<f64>,
    pub scale: Vec<f64>,
    /// Texels whose corrected quaternion collapsed and kept the base one.
    pub fallback: usize,
}

pub fn apply_corrections_with(
    maps: &GaussianMapSet,
    delta_position: &[f64],
    delta_rotation: &[f64],
    delta_scale: &[f64],
) -> CorrectedParams {
    let n = maps.pixel_count();
    let mut out = CorrectedParams {
        position: vec![0.0; 3 * n],
        rotation: vec![0.0; 4 * n],
        scale: vec![0.0; 3 * n],
        fallback: 0,
    };
    for i in 0..n {
        if !maps.valid[i] {
            continue;
        }
        for c in 0..3 {
            out.position[3 * i + c] = maps.base_position[3 * i + c] + delta_position[3 * i + c];
            out.scale[3 * i + c] = (maps.base_scale[3 * i + c] + delta_scale[3 * i + c]).max(MIN_SCALE);
        }
        let base = maps.rotation(i);
        let sum = [
            base[0] + delta_rotation[4 * i],
            base[1] + delta_rotation[4 * i + 1],
            base[2] + delta_rotation[4 * i + 2],
            base[3] + delta_rotation[4 * i + 3],
        ];
        let (q, collapsed) = corrected_quat(&base, &sum);
        if collapsed {
            out.fallback += 1;
        }
        out.rotation[4 * i..4 * i + 4].copy_from_slice(&q);
    }
    out
}

/// Normalises `base + delta`; returns the base quaternion and `true` when the
/// sum is too short to normalise.
pub fn corrected_quat(base: &Quat, sum: &Quat) -> (Quat, bool) {
    let norm = quat_norm(sum);
    if norm < DEGENERATE_QUAT {
        return (*base, true);
    }
    (
        canonical_sign([sum[0] / norm, sum[1] / norm, sum[2] / norm, sum[3] / norm]),
        false,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::quat_to_matrix;
    use approx::assert_relative_eq;

    fn triangle_mesh(uv: [[f64; 2]; 3], pos: [[f64; 3]; 3]) -> SkinnedMesh {
        SkinnedMesh {
            vertices: pos.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect(),
            triangles: vec![[0, 1, 2]],
            uv_coords: vec![uv],
            skin_weights: vec![vec![(0, 1.0)]; 3],
        }
    }

    /// Independent enumeration of texel centres against the half-plane
    /// `v <= u` (the lower-right triangle of the unit square).
    fn count_below_diagonal(r: usize) -> usize {
        let mut n = 0;
        for y in 0..r {
            for x in 0..r {
                let (u, v) = ((x as f64 + 0.5) / r as f64, (y as f64 + 0.5) / r as f64);
                if v <= u {
                    n += 1;
                }
            }
        }
        n
    }

    #[test]
    fn half_square_triangle_covers_ten_of_sixteen() {
        let m = triangle_mesh(
            [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]],
            [[0.0; 3], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0]],
        );
        let oracle = count_below_diagonal(4);
        assert_eq!(oracle, 10);
        let err = rasterize_uv(&m, 4).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
        // resolution 4 is below the operational minimum; check the coverage rule at 8
        let (maps, stats) = rasterize_uv(&m, 8).unwrap();
        assert_eq!(stats.valid_pixels, count_below_diagonal(8));
        assert_eq!(stats.overlaps, 0);
        assert_eq!(maps.valid_count(), 36);
    }

    #[test]
    fn half_square_coverage_rule_at_four() {
        // the coverage rule itself, independent of the resolution floor
        let uv = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]];
        let area2 = 2.0 * crate::mesh::uv_area(&uv);
        let mut valid = 0;
        for y in 0..4 {
            for x in 0..4 {
                let b = barycentric(&uv, area2, (x as f64 + 0.5) / 4.0, (y as f64 + 0.5) / 4.0);
                if b.iter().all(|&c| c >= -EDGE_EPS) {
                    valid += 1;
                }
            }
        }
        assert_eq!(valid, 10);
    }

    #[test]
    fn empty_mesh_has_no_valid_pixels() {
        let (maps, stats) = rasterize_uv(&SkinnedMesh::default(), 16).unwrap();
        assert_eq!(stats.valid_pixels, 0);
        assert!(maps.base_position.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_positions_interpolate_to_constant() {
        let p = [0.3, -1.2, 2.0];
        let m = triangle_mesh([[0.1, 0.1], [0.9, 0.2], [0.4, 0.95]], [p, p, p]);
        let (maps, _) = rasterize_uv(&m, 32).unwrap();
        for i in maps.valid_indices() {
            assert_eq!(&maps.base_position[3 * i..3 * i + 3], &p);
        }
    }

    #[test]
    fn overlapping_triangles_keep_lowest_index() {
        let mut m = triangle_mesh(
            [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            [[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        );
        m.vertices.extend([
            Vector3::new(0.0, 0.0, 5.0),
            Vector3::new(1.0, 0.0, 5.0),
            Vector3::new(0.0, 1.0, 5.0),
        ]);
        m.skin_weights.extend(vec![vec![(0, 1.0)]; 3]);
        m.triangles.push([3, 4, 5]);
        m.uv_coords.push([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let (maps, stats) = rasterize_uv(&m, 16).unwrap();
        assert!(stats.overlaps > 0);
        for i in maps.valid_indices() {
            assert_eq!(maps.base_position[3 * i + 2], 0.0);
        }
    }

    #[test]
    fn flat_triangle_along_x_has_identity_rotation() {
        let m = triangle_mesh(
            [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            [[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        );
        let (mut maps, _) = rasterize_uv(&m, 16).unwrap();
        assert_eq!(init_base_rotation(&mut maps, &m).unwrap(), 0);
        for i in maps.valid_indices() {
            assert_relative_eq!(maps.rotation(i)[0], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn rotated_triangle_frame_matches_rotation() {
        // 90 degrees about x applied to the xy-plane triangle
        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
        let pts = [Vector3::zeros(), Vector3::x(), Vector3::y()].map(|p| rx * p);
        let m = triangle_mesh([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], pts.map(|p| [p.x, p.y, p.z]));
        let (mut maps, _) = rasterize_uv(&m, 16).unwrap();
        init_base_rotation(&mut maps, &m).unwrap();
        let i = maps.valid_indices()[0];
        assert_relative_eq!(quat_to_matrix(&maps.rotation(i)), rx, epsilon = 1e-12);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let q = maps.rotation(i);
        assert_relative_eq!(q[0], h, epsilon = 1e-12);
        assert_relative_eq!(q[1], h, epsilon = 1e-12);
    }

    #[test]
    fn zero_area_triangle_falls_back() {
        let m = triangle_mesh(
            [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            [[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
        );
        let (mut maps, _) = rasterize_uv(&m, 16).unwrap();
        assert_eq!(init_base_rotation(&mut maps, &m).unwrap(), 1);
        for i in maps.valid_indices() {
            assert_eq!(maps.rotation(i), IDENTITY_QUAT);
        }
    }

    fn maps_from_points(points: &[[f64; 3]]) -> GaussianMapSet {
        let mut maps = GaussianMapSet::empty(points.len(), 1);
        for (i, p) in points.iter().enumerate() {
            maps.valid[i] = true;
            maps.base_position[3 * i..3 * i + 3].copy_from_slice(p);
        }
        maps
    }

    #[test]
    fn grid_interior_scale_equals_spacing() {
        let h = 0.02;
        let pts: Vec<[f64; 3]> = (0..7)
            .flat_map(|y| (0..7).map(move |x| [x as f64 * h, y as f64 * h, 0.0]))
            .collect();
        let mut maps = maps_from_points(&pts);
        init_base_scale(&mut maps, 3).unwrap();
        let centre = 3 * 7 + 3;
        for c in 0..3 {
            assert_relative_eq!(maps.base_scale[3 * centre + c], h, epsilon = 1e-12);
        }
    }

    #[test]
    fn coincident_points_hit_scale_floor() {
        let mut maps = maps_from_points(&[[0.0; 3], [0.0; 3], [0.5, 0.0, 0.0]]);
        init_base_scale(&mut maps, 1).unwrap();
        assert_eq!(maps.base_scale[0], MIN_SCALE);
        assert_eq!(maps.base_scale[3], MIN_SCALE);
        assert_relative_eq!(maps.base_scale[6], 0.5);
    }

    #[test]
    fn too_few_points_is_an_error() {
        let mut maps = maps_from_points(&[[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        match init_base_scale(&mut maps, 3) {
            Err(Error::TooFewPoints { required, .. }) => assert_eq!(required, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn knn_sweep_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<[f64; 3]> = (0..300).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let fast = knn_mean_distance(&pts, 3);
        for (i, p) in pts.iter().enumerate() {
            let mut d: Vec<f64> = pts
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
                .collect();
            d.sort_by(f64::total_cmp);
            let brute = (d[0] + d[1] + d[2]) / 3.0;
            assert_relative_eq!(fast[i], brute, epsilon = 1e-12);
        }
    }

    fn unit_maps() -> GaussianMapSet {
        let mut maps = maps_from_points(&[[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]]);
        for i in 0..2 {
            maps.base_rotation[4 * i..4 * i + 4].copy_from_slice(&[0.5, 0.5, 0.5, 0.5]);
            maps.base_scale[3 * i..3 * i + 3].copy_from_slice(&[0.01, 0.02, 0.03]);
        }
        maps
    }

    #[test]
    fn zero_corrections_are_identity() {
        let maps = unit_maps();
        let c = maps.apply_corrections();
        assert_eq!(c.position, maps.base_position);
        assert_eq!(c.rotation, maps.base_rotation);
        assert_eq!(c.scale, maps.base_scale);
    }

    #[test]
    fn negative_scale_correction_is_clamped() {
        let mut maps = unit_maps();
        for i in 0..6 {
            maps.delta_scale[i] = -2.0 * maps.base_scale[i];
        }
        assert!(maps.apply_corrections().scale.iter().all(|&s| s == MIN_SCALE));
    }

    #[test]
    fn doubling_quaternion_renormalises_to_itself() {
        let mut maps = unit_maps();
        maps.delta_rotation = maps.base_rotation.clone();
        let c = maps.apply_corrections();
        for (a, b) in c.rotation.iter().zip(&maps.base_rotation) {
            assert_relative_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn collapsed_quaternion_keeps_base() {
        let mut maps = unit_maps();
        maps.delta_rotation = maps.base_rotation.iter().map(|v| -v).collect();
        let c = maps.apply_corrections();
        assert_eq!(c.fallback, 2);
        assert_eq!(c.rotation, maps.base_rotation);
    }

    #[test]
    fn influences_keep_top_four() {
        let inf = Influences::from_dense(&[(0, 0.1), (1, 0.3), (2, 0.2), (3, 0.25), (4, 0.15)]);
        let total: f64 = inf.weights.iter().sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-15);
        assert_eq!(inf.weight_of(0), 0.0);
        assert_eq!(inf.joints[0], 1);
    }
}
