//! Linear float images plus the raw dump format and sRGB encoding used for
//! PNG output.
//!
//! Raw dump layout: three little-endian `u32` (width, height, channels)
//! followed by `width * height * channels` little-endian `f32` values in
//! row-major, channel-interleaved order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FloatImage {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        FloatImage {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, value: &[f64]) -> Self {
        let channels = value.len();
        let mut data = Vec::with_capacity(width * height * channels);
        for _ in 0..width * height {
            data.extend_from_slice(value);
        }
        FloatImage {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &FloatImage) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn max_abs_diff(&self, other: &FloatImage) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn write_raw(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_raw_bytes())?;
        w.flush()
    }

    pub fn to_raw_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.data.len());
        for v in [self.width, self.height, self.channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn read_raw(mut r: impl Read) -> std::io::Result<Self> {
        let mut header = [0u8; 12];
        r.read_exact(&mut header)?;
        let dim = |k: usize| u32::from_le_bytes(header[4 * k..4 * k + 4].try_into().unwrap()) as usize;
        let (width, height, channels) = (dim(0), dim(1), dim(2));
        let mut bytes = vec![0u8; 4 * width * height * channels];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(FloatImage {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn save_raw(&self, path: &Path) -> Result<()> {
        crate::io::write(path, &self.to_raw_bytes())
    }

    pub fn load_raw(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        FloatImage::read_raw(std::io::BufReader::new(file)).map_err(|e| Error::io(path, e))
    }

    /// 8-bit sRGB encoding of a linear image, clamped to [0, 1].
    pub fn to_srgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| encode_srgb(v)).collect()
    }
}

pub fn linear_to_srgb(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.0031308 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

fn encode_srgb(v: f64) -> u8 {
    (linear_to_srgb(v) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip_is_exact_for_f32_values() {
        let mut img = FloatImage::new(3, 2, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i as f32 * 0.37) as f64;
        }
        let back = FloatImage::read_raw(&img.to_raw_bytes()[..]).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn srgb_endpoints() {
        let img = FloatImage::filled(1, 1, &[0.0, 1.0, 2.0]);
        assert_eq!(img.to_srgb8(), vec![0, 255, 255]);
        assert!((linear_to_srgb(0.5) - 0.7353569830524495).abs() < 1e-12);
    }
}
