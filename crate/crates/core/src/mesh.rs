//! Skinned triangle meshes and their text formats.
//!
//! Geometry comes from OBJ-style records (`v`, `vt`, `f` with per-corner UV
//! indices); skinning weights come from a JSON sidecar holding, per vertex,
//! an array of `[joint_index, weight]` pairs.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub const MAX_INFLUENCES: usize = 4;
const WEIGHT_SUM_TOL: f64 = 1e-6;
const MIN_UV_AREA: f64 = 1e-12;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SkinnedMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Vec<[usize; 3]>,
    /// UV coordinates of the three corners of each triangle.
    pub uv_coords: Vec<[[f64; 2]; 3]>,
    /// Per-vertex `(joint, weight)` influences.
    pub skin_weights: Vec<Vec<(usize, f64)>>,
}

impl SkinnedMesh {
    /// Checks the structural invariants. `joint_count`, when known, also
    /// bounds the joint indices.
    pub fn validate(&self, joint_count: Option<usize>) -> Result<()> {
        if self.uv_coords.len() != self.triangles.len() {
            return Err(Error::InvalidMesh(format!(
                "{} triangles but {} UV triples",
                self.triangles.len(),
                self.uv_coords.len()
            )));
        }
        if self.skin_weights.len() != self.vertices.len() {
            return Err(Error::InvalidMesh(format!(
                "{} vertices but {} skin weight entries",
                self.vertices.len(),
                self.skin_weights.len()
            )));
        }
        for (v, weights) in self.skin_weights.iter().enumerate() {
            if weights.is_empty() || weights.len() > MAX_INFLUENCES {
                return Err(Error::InvalidMesh(format!(
                    "vertex {v} has {} influences (expected 1..={MAX_INFLUENCES})",
                    weights.len()
                )));
            }
            let mut sum = 0.0;
            for &(joint, w) in weights {
                if !(w >= 0.0) {
                    return Err(Error::InvalidMesh(format!(
                        "vertex {v} has negative or non-finite weight {w}"
                    )));
                }
                if let Some(j) = joint_count {
                    if joint >= j {
                        return Err(Error::InvalidMesh(format!(
                            "vertex {v} references joint {joint} but the skeleton has {j}"
                        )));
                    }
                }
                sum += w;
            }
            if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
                return Err(Error::InvalidMesh(format!(
                    "weights of vertex {v} sum to {sum}, expected 1"
                )));
            }
        }
        for (t, (tri, uv)) in self.triangles.iter().zip(&self.uv_coords).enumerate() {
            if let Some(&bad) = tri.iter().find(|&&i| i >= self.vertices.len()) {
                return Err(Error::InvalidMesh(format!(
                    "triangle {t} references vertex {bad} of {}",
                    self.vertices.len()
                )));
            }
            if uv.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::InvalidMesh(format!(
                    "triangle {t} has UV coordinates outside [0,1]"
                )));
            }
            if uv_area(uv).abs() <= MIN_UV_AREA {
                return Err(Error::InvalidMesh(format!("triangle {t} is degenerate in UV")));
            }
        }
        Ok(())
    }

    pub fn load(obj_path: &Path, weights_path: &Path) -> Result<Self> {
        let obj = std::fs::read_to_string(obj_path).map_err(|e| Error::io(obj_path, e))?;
        let mut mesh = parse_obj(&obj, obj_path)?;
        let weights = std::fs::read_to_string(weights_path).map_err(|e| Error::io(weights_path, e))?;
        mesh.skin_weights = parse_skin_weights(&weights, weights_path)?;
        Ok(mesh)
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let _ = writeln!(s, "v {} {} {}", v.x, v.y, v.z);
        }
        for uv in self.uv_coords.iter().flatten() {
            let _ = writeln!(s, "vt {} {}", uv[0], uv[1]);
        }
        for (t, tri) in self.triangles.iter().enumerate() {
            let _ = writeln!(
                s,
                "f {}/{} {}/{} {}/{}",
                tri[0] + 1,
                3 * t + 1,
                tri[1] + 1,
                3 * t + 2,
                tri[2] + 1,
                3 * t + 3
            );
        }
        s
    }

    pub fn skin_weights_json(&self) -> String {
        let rows: Vec<Vec<(usize, f64)>> = self.skin_weights.clone();
        serde_json::to_string(&rows).expect("weights serialise")
    }
}

/// Signed UV area of a triangle.
pub fn uv_area(uv: &[[f64; 2]; 3]) -> f64 {
    0.5 * ((uv[1][0] - uv[0][0]) * (uv[2][1] - uv[0][1]) - (uv[2][0] - uv[0][0]) * (uv[1][1] - uv[0][1]))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Parses `v`, `vt` and `f` records. Polygons are fan-triangulated; every
/// face corner must carry a UV index. Other record types are ignored.
pub fn parse_obj(text: &str, path: &Path) -> Result<SkinnedMesh> {
    let mut vertices = Vec::new();
    let mut texcoords: Vec<[f64; 2]> = Vec::new();
    let mut faces: Vec<(usize, Vec<(i64, i64)>)> = Vec::new();

    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut parts = line.split_whitespace();
        let Some(tag) = parts.next() else { continue };
        let nums = |parts: std::str::SplitWhitespace, want: usize| -> Result<Vec<f64>> {
            let vals: Vec<f64> = parts
                .take(want)
                .map(|p| {
                    p.parse::<f64>()
                        .map_err(|_| parse_err(path, line_no, format!("bad number `{p}`")))
                })
                .collect::<Result<_>>()?;
            if vals.len() < want {
                return Err(parse_err(path, line_no, format!("expected {want} numbers")));
            }
            Ok(vals)
        };
        match tag {
            "v" => {
                let v = nums(parts, 3)?;
                vertices.push(Vector3::new(v[0], v[1], v[2]));
            }
            "vt" => {
                let v = nums(parts, 2)?;
                texcoords.push([v[0], v[1]]);
            }
            "f" => {
                let mut corners = Vec::new();
                for p in parts {
                    let mut idx = p.split('/');
                    let vi = idx.next().and_then(|s| s.parse::<i64>().ok());
                    let ti = idx.next().and_then(|s| s.parse::<i64>().ok());
                    match (vi, ti) {
                        (Some(v), Some(t)) => corners.push((v, t)),
                        _ => {
                            return Err(parse_err(
                                path,
                                line_no,
                                format!("face corner `{p}` needs v/vt indices"),
                            ))
                        }
                    }
                }
                if corners.len() < 3 {
                    return Err(parse_err(path, line_no, "face with fewer than 3 corners"));
                }
                faces.push((line_no, corners));
            }
            _ => {}
        }
    }

    let resolve = |i: i64, len: usize, line_no: usize, kind: &str| -> Result<usize> {
        let r = if i > 0 { i - 1 } else { len as i64 + i };
        if r < 0 || r as usize >= len {
            return Err(parse_err(path, line_no, format!("{kind} index {i} out of range")));
        }
        Ok(r as usize)
    };

    let mut triangles = Vec::new();
    let mut uv_coords = Vec::new();
    for (line_no, corners) in faces {
        let c: Vec<(usize, [f64; 2])> = corners
            .iter()
            .map(|&(v, t)| {
                Ok((
                    resolve(v, vertices.len(), line_no, "vertex")?,
                    texcoords[resolve(t, texcoords.len(), line_no, "texcoord")?],
                ))
            })
            .collect::<Result<_>>()?;
        for k in 1..c.len() - 1 {
            triangles.push([c[0].0, c[k].0, c[k + 1].0]);
            uv_coords.push([c[0].1, c[k].1, c[k + 1].1]);
        }
    }

    Ok(SkinnedMesh {
        skin_weights: vec![Vec::new(); vertices.len()],
        vertices,
        triangles,
        uv_coords,
    })
}

pub fn parse_skin_weights(text: &str, path: &Path) -> Result<Vec<Vec<(usize, f64)>>> {
    let rows: Vec<Vec<(f64, f64)>> = serde_json::from_str(text).map_err(|e| Error::json(path, e))?;
    rows.into_iter()
        .enumerate()
        .map(|(v, row)| {
            row.into_iter()
                .map(|(j, w)| {
                    if j < 0.0 || j.fract() != 0.0 {
                        Err(Error::InvalidMesh(format!(
                            "vertex {v}: joint index {j} is not a non-negative integer"
                        )))
                    } else {
                        Ok((j as usize, w))
                    }
                })
                .collect()
        })
        .collect()
}
