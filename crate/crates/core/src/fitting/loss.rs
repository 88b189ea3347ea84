use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::FloatImage;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// A Gaussian may grow to this multiple of its base scale before the scale
/// penalty applies.
pub const SCALE_CAP: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub ssim: f64,
    /// Kept so configs carrying it parse; the perceptual term is not
    /// computed.
    pub lpips: f64,
    pub offset: f64,
    pub scale: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ssim: 0.2,
            lpips: 0.0,
            offset: 0.001,
            scale: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.ssim, self.lpips, self.offset, self.scale]
            .iter()
            .any(|w| !(*w >= 0.0))
            || self.ssim > 1.0
        {
            return Err(Error::InvalidArgument(
                "loss weights must be non-negative and ssim <= 1".into(),
            ));
        }
        if self.lpips != 0.0 {
            log::warn!(
                "lpips weight {} is ignored: the perceptual term is not available",
                self.lpips
            );
        }
        Ok(())
    }
}

fn check_shape(a: &FloatImage, b: &FloatImage) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::mismatch("image size", b.data.len(), a.data.len()));
    }
    Ok(())
}

/// Mean absolute difference over all channels, or over masked pixels only.
pub fn loss_l1(rendered: &FloatImage, target: &FloatImage, mask: Option<&[bool]>) -> Result<f64> {
    Ok(l1_with_grad(rendered, target, mask, false)?.0)
}

fn l1_with_grad(
    rendered: &FloatImage,
    target: &FloatImage,
    mask: Option<&[bool]>,
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    check_shape(rendered, target)?;
    let ch = rendered.channels;
    if let Some(m) = mask {
        if m.len() != rendered.width * rendered.height {
            return Err(Error::mismatch(
                "mask length",
                rendered.width * rendered.height,
                m.len(),
            ));
        }
    }
    let inside = |i: usize| mask.is_none_or(|m| m[i / ch]);
    let count = (0..rendered.data.len()).filter(|&i| inside(i)).count();
    let mut grad = if want_grad {
        vec![0.0; rendered.data.len()]
    } else {
        Vec::new()
    };
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / count as f64;
    let mut sum = 0.0;
    for (i, (r, t)) in rendered.data.iter().zip(&target.data).enumerate() {
        if !inside(i) {
            continue;
        }
        sum += (r - t).abs();
        if want_grad {
            grad[i] = if r > t {
                inv
            } else if r < t {
                -inv
            } else {
                0.0
            };
        }
    }
    Ok((sum * inv, grad))
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable "same" Gaussian filter of a single-channel plane with zero
/// padding. The kernel is symmetric, so this is also its own adjoint.
fn blur(src: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for (row, dst) in src.chunks_exact(w).zip(tmp.chunks_exact_mut(w)) {
        for (x, d) in dst.iter_mut().enumerate() {
            let lo = (r - x as isize).max(0) as usize;
            let hi = (w as isize - x as isize + r).min(SSIM_WINDOW as isize) as usize;
            let start = x as isize + lo as isize - r;
            let mut acc = 0.0;
            for (t, v) in taps[lo..hi].iter().zip(&row[start as usize..]) {
                acc += t * v;
            }
            *d = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for (k, t) in taps.iter().enumerate() {
            let sy = y as isize + k as isize - r;
            if sy < 0 || sy as usize >= h {
                continue;
            }
            let src_row = &tmp[sy as usize * w..(sy as usize + 1) * w];
            let dst_row = &mut out[y * w..(y + 1) * w];
            for (d, s) in dst_row.iter_mut().zip(src_row) {
                *d += t * s;
            }
        }
    }
    out
}

/// Mean SSIM over pixels and channels, and optionally its gradient with
/// respect to `rendered`.
fn ssim_impl(rendered: &FloatImage, target: &FloatImage, want_grad: bool) -> Result<(f64, Option<FloatImage>)> {
    check_shape(rendered, target)?;
    let (w, h, ch) = (rendered.width, rendered.height, rendered.channels);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            window: SSIM_WINDOW,
        });
    }
    let taps = gaussian_taps();
    let n = w * h;
    let total = (n * ch) as f64;
    let mut grad = want_grad.then(|| FloatImage::new(w, h, ch));
    let mut sum = 0.0;
    for c in 0..ch {
        let x: Vec<f64> = (0..n).map(|i| rendered.data[i * ch + c]).collect();
        let y: Vec<f64> = (0..n).map(|i| target.data[i * ch + c]).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let mx = blur(&x, w, h, &taps);
        let my = blur(&y, w, h, &taps);
        let exx = blur(&xx, w, h, &taps);
        let eyy = blur(&yy, w, h, &taps);
        let exy = blur(&xy, w, h, &taps);

        let mut d_mx = vec![0.0; if want_grad { n } else { 0 }];
        let mut d_exx = d_mx.clone();
        let mut d_exy = d_mx.clone();
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let sxx = exx[i] - ux * ux;
            let syy = eyy[i] - uy * uy;
            let sxy = exy[i] - ux * uy;
            let a1 = 2.0 * ux * uy + SSIM_C1;
            let a2 = 2.0 * sxy + SSIM_C2;
            let b1 = ux * ux + uy * uy + SSIM_C1;
            let b2 = sxx + syy + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            sum += s;
            if want_grad {
                d_mx[i] = s * (2.0 * uy / a1 - 2.0 * uy / a2 - 2.0 * ux / b1 + 2.0 * ux / b2) / total;
                d_exx[i] = -s / b2 / total;
                d_exy[i] = 2.0 * s / a2 / total;
            }
        }
        if let Some(g) = grad.as_mut() {
            let g_mx = blur(&d_mx, w, h, &taps);
            let g_exx = blur(&d_exx, w, h, &taps);
            let g_exy = blur(&d_exy, w, h, &taps);
            for i in 0..n {
                g.data[i * ch + c] = g_mx[i] + 2.0 * x[i] * g_exx[i] + y[i] * g_exy[i];
            }
        }
    }
    Ok((sum / total, grad))
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5) and zero padding.
pub fn ssim(rendered: &FloatImage, target: &FloatImage) -> Result<f64> {
    Ok(ssim_impl(rendered, target, false)?.0)
}

/// `1 - SSIM`.
pub fn loss_ssim(rendered: &FloatImage, target: &FloatImage) -> Result<f64> {
    Ok(1.0 - ssim(rendered, target)?)
}

/// Mean over valid texels of the Euclidean norm of the position offset.
pub fn loss_offset(delta_position: &[f64], valid: &[bool]) -> f64 {
    offset_with_grad(delta_position, valid, false).0
}

fn offset_with_grad(delta_position: &[f64], valid: &[bool], want_grad: bool) -> (f64, Vec<f64>) {
    let count = valid.iter().filter(|&&v| v).count();
    let mut grad = if want_grad {
        vec![0.0; delta_position.len()]
    } else {
        Vec::new()
    };
    if count == 0 {
        return (0.0, grad);
    }
    let inv = 1.0 / count as f64;
    let mut sum = 0.0;
    for (i, _) in valid.iter().enumerate().filter(|(_, v)| **v) {
        let d = &delta_position[3 * i..3 * i + 3];
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        sum += norm;
        if want_grad && norm > 0.0 {
            for k in 0..3 {
                grad[3 * i + k] = d[k] / norm * inv;
            }
        }
    }
    (sum * inv, grad)
}

/// Per component `|s|` where `s > 10 * base`, otherwise 0; summed over
/// components and averaged over valid texels.
pub fn loss_scale(scale: &[f64], base_scale: &[f64], valid: &[bool]) -> f64 {
    scale_with_grad(scale, base_scale, valid, false).0
}

fn scale_with_grad(scale: &[f64], base_scale: &[f64], valid: &[bool], want_grad: bool) -> (f64, Vec<f64>) {
    let count = valid.iter().filter(|&&v| v).count();
    let mut grad = if want_grad { vec![0.0; scale.len()] } else { Vec::new() };
    if count == 0 {
        return (0.0, grad);
    }
    let inv = 1.0 / count as f64;
    let mut sum = 0.0;
    for (i, _) in valid.iter().enumerate().filter(|(_, v)| **v) {
        for k in 3 * i..3 * i + 3 {
            if scale[k] > SCALE_CAP * base_scale[k] {
                sum += scale[k].abs();
                if want_grad {
                    grad[k] = scale[k].signum() * inv;
                }
            }
        }
    }
    (sum * inv, grad)
}

/// Peak signal-to-noise ratio of images in [0, 1]; infinite when they match.
pub fn psnr(rendered: &FloatImage, target: &FloatImage) -> Result<f64> {
    check_shape(rendered, target)?;
    let mse = rendered
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / rendered.data.len().max(1) as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Everything the objective looks at for one rendered view.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub rendered: &'a FloatImage,
    pub target: &'a FloatImage,
    pub mask: Option<&'a [bool]>,
    pub delta_position: &'a [f64],
    /// Corrected scale per texel.
    pub scale: &'a [f64],
    pub base_scale: &'a [f64],
    pub valid: &'a [bool],
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub l1: f64,
    /// `1 - SSIM`.
    pub ssim: f64,
    pub lpips: f64,
    pub offset: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub image: FloatImage,
    pub delta_position: Vec<f64>,
    pub scale: Vec<f64>,
}

/// Weighted sum of already computed terms.
pub fn weighted_total(l1: f64, ssim_loss: f64, offset: f64, scale: f64, w: &LossWeights) -> LossTerms {
    LossTerms {
        total: l1 - w.ssim * l1 + w.ssim * ssim_loss + w.offset * offset + w.scale * scale,
        l1,
        ssim: ssim_loss,
        lpips: 0.0,
        offset,
        scale,
    }
}

/// `(1 - w_ssim) L1 + w_ssim (1 - SSIM) + w_offset offset + w_scale scale`.
pub fn total_loss(inputs: &LossInputs, weights: &LossWeights) -> Result<LossTerms> {
    let l1 = loss_l1(inputs.rendered, inputs.target, inputs.mask)?;
    let s = if weights.ssim > 0.0 {
        loss_ssim(inputs.rendered, inputs.target)?
    } else {
        0.0
    };
    let off = loss_offset(inputs.delta_position, inputs.valid);
    let sc = loss_scale(inputs.scale, inputs.base_scale, inputs.valid);
    Ok(weighted_total(l1, s, off, sc, weights))
}

/// The total loss plus its gradient with respect to the rendered image, the
/// position offsets and the corrected scales.
pub fn total_loss_with_grad(inputs: &LossInputs, weights: &LossWeights) -> Result<(LossTerms, LossGradient)> {
    let (l1, g_l1) = l1_with_grad(inputs.rendered, inputs.target, inputs.mask, true)?;
    let mut image = FloatImage::new(inputs.rendered.width, inputs.rendered.height, inputs.rendered.channels);
    for (g, v) in image.data.iter_mut().zip(&g_l1) {
        *g = (1.0 - weights.ssim) * v;
    }
    let mut s_loss = 0.0;
    if weights.ssim > 0.0 {
        let (s, g) = ssim_impl(inputs.rendered, inputs.target, true)?;
        s_loss = 1.0 - s;
        for (o, v) in image.data.iter_mut().zip(&g.expect("gradient requested").data) {
            *o -= weights.ssim * v;
        }
    }
    let (off, mut g_off) = offset_with_grad(inputs.delta_position, inputs.valid, true);
    g_off.iter_mut().for_each(|v| *v *= weights.offset);
    let (sc, mut g_sc) = scale_with_grad(inputs.scale, inputs.base_scale, inputs.valid, true);
    g_sc.iter_mut().for_each(|v| *v *= weights.scale);
    Ok((
        weighted_total(l1, s_loss, off, sc, weights),
        LossGradient {
            image,
            delta_position: g_off,
            scale: g_sc,
        },
    ))
}
