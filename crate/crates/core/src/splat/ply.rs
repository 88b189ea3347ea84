//! Binary little-endian PLY in the layout common 3DGS viewers read:
//! `x y z f_dc_0..2 opacity scale_0..2 rot_0..3`, all `float`.
//!
//! A posed splat's linear part can be a skinning blend rather than a
//! rotation, so the exporter writes the eigenframe of the full covariance.
//! Loading the file back reproduces the covariance up to f32 rounding.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use super::{covariance3d, Splat};
use crate::error::{Error, Result};
use crate::geometry::{matrix_to_quat, quat_to_matrix};
use crate::uvmap::MIN_SCALE;

/// Zeroth-order spherical harmonic basis constant.
pub const SH_C0: f64 = 0.28209479177387814;

const PROPERTIES: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2",
    "rot_3",
];

/// Rotation and per-axis scale whose `R S Sᵀ Rᵀ` equals `Σ`.
pub fn covariance_frame(sigma: &Matrix3<f64>) -> (Matrix3<f64>, Vector3<f64>) {
    let eig = SymmetricEigen::new(*sigma);
    let mut r = eig.eigenvectors;
    if r.determinant() < 0.0 {
        let c = -r.column(2);
        r.set_column(2, &c);
    }
    let s = eig.eigenvalues.map(|v| v.max(MIN_SCALE * MIN_SCALE).sqrt());
    (r, s)
}

fn record(s: &Splat) -> [f32; 14] {
    let (r, scale) = covariance_frame(&covariance3d(&s.linear, &s.scale));
    let q = matrix_to_quat(&r);
    let mut out = [0f32; 14];
    for k in 0..3 {
        out[k] = s.position[k] as f32;
        out[3 + k] = ((s.color[k] - 0.5) / SH_C0) as f32;
        out[7 + k] = scale[k].ln() as f32;
    }
    out[6] = s.opacity_logit as f32;
    for k in 0..4 {
        out[10 + k] = q[k] as f32;
    }
    out
}

pub fn write_ply(mut w: impl Write, splats: &[Splat]) -> std::io::Result<()> {
    let mut header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n",
        splats.len()
    );
    for p in PROPERTIES {
        header.push_str(&format!("property float {p}\n"));
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes())?;
    let mut buf = Vec::with_capacity(splats.len() * 56);
    for s in splats {
        for v in record(s) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    w.flush()
}

pub fn save_ply(path: &Path, splats: &[Splat]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_ply(std::io::BufWriter::new(file), splats).map_err(|e| Error::io(path, e))
}

/// Reads files produced by [`write_ply`]. Other float-only vertex layouts
/// are accepted as long as they contain the fourteen properties above.
pub fn read_ply(r: impl Read) -> Result<Vec<Splat>> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    let mut count = None;
    let mut props: Vec<String> = Vec::new();
    let mut first = true;
    loop {
        line.clear();
        if r.read_line(&mut line).map_err(|e| Error::Format(e.to_string()))? == 0 {
            return Err(Error::Format("PLY header is not terminated".into()));
        }
        let l = line.trim();
        if first {
            if l != "ply" {
                return Err(Error::Format("missing PLY magic".into()));
            }
            first = false;
            continue;
        }
        let words: Vec<&str> = l.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] if *fmt != "binary_little_endian" => {
                return Err(Error::Format(format!("unsupported PLY format {fmt}")));
            }
            ["element", "vertex", n] => {
                count = Some(
                    n.parse::<usize>()
                        .map_err(|_| Error::Format(format!("bad vertex count {n}")))?,
                )
            }
            ["property", ty, name] => {
                if *ty != "float" {
                    return Err(Error::Format(format!("property {name} has type {ty}, expected float")));
                }
                props.push(name.to_string());
            }
            _ => {}
        }
    }
    let count = count.ok_or_else(|| Error::Format("PLY has no vertex element".into()))?;
    let slot = |name: &str| {
        props
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| Error::Format(format!("PLY lacks property {name}")))
    };
    let idx: Vec<usize> = PROPERTIES.iter().map(|p| slot(p)).collect::<Result<_>>()?;
    let mut bytes = vec![0u8; count * props.len() * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Format(format!("truncated PLY body: {e}")))?;
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(values
        .chunks_exact(props.len())
        .map(|row| {
            let v = |k: usize| row[idx[k]];
            let q = [v(10), v(11), v(12), v(13)];
            let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            Splat {
                position: Vector3::new(v(0), v(1), v(2)),
                linear: quat_to_matrix(&q.map(|x| x / n)),
                scale: Vector3::new(v(7).exp(), v(8).exp(), v(9).exp()),
                opacity_logit: v(6),
                color: [v(3) * SH_C0 + 0.5, v(4) * SH_C0 + 0.5, v(5) * SH_C0 + 0.5],
            }
        })
        .collect())
}

pub fn load_ply(path: &Path) -> Result<Vec<Splat>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_ply(file)
}
