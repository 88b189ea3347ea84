use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over a fixed list of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Tensor updates skipped because their gradient was not finite.
    pub skipped: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, shapes: &[usize]) -> Self {
        Adam {
            config,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            skipped: 0,
        }
    }

    /// One update of every tensor. A tensor whose gradient contains a
    /// non-finite value is left untouched, moments included. Returns the
    /// number of tensors skipped.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<usize> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::mismatch("optimizer tensor count", self.m.len(), params.len()));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[k].len() || g.len() != self.m[k].len() {
                return Err(Error::mismatch(
                    format!("optimizer tensor {k} length"),
                    self.m[k].len(),
                    g.len(),
                ));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let mut skipped = 0;
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if g.iter().any(|v| !v.is_finite()) {
                skipped += 1;
                continue;
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((pi, &gi), mi), vi) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
        self.skipped += skipped as u64;
        Ok(skipped)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut adam = Adam::new(AdamConfig::default(), &[3]);
        let mut p = vec![1.0, -2.0, 3.0];
        adam.step(&mut [&mut p], &[&[0.0; 3]]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(cfg, &[2]);
        let mut p = vec![0.0, 0.0];
        for _ in 0..2000 {
            let before = p.clone();
            adam.step(&mut [&mut p], &[&[0.5, -3.0]]).unwrap();
            for k in 0..2 {
                let du = (p[k] - before[k]).abs();
                assert!(du <= cfg.lr * (1.0 + 1e-6));
            }
        }
        let before = p.clone();
        adam.step(&mut [&mut p], &[&[0.5, -3.0]]).unwrap();
        assert!(((before[0] - p[0]) - cfg.lr).abs() < 1e-9);
        assert!(((p[1] - before[1]) - cfg.lr).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut adam = Adam::new(AdamConfig::default(), &[2, 1]);
        let mut a = vec![1.0, 1.0];
        let mut b = vec![1.0];
        let n = adam.step(&mut [&mut a, &mut b], &[&[f64::NAN, 1.0], &[1.0]]).unwrap();
        assert_eq!(n, 1);
        assert_eq!(adam.skipped, 1);
        assert_eq!(a, vec![1.0, 1.0]);
        assert!(b[0] < 1.0);
    }
}
