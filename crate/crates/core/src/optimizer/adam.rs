//! Bias-corrected Adam over named parameter groups.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("adam.beta1", self.beta1), ("adam.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::validation(name, format!("must be in [0, 1), got {v}")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::validation("adam.eps", format!("must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Moment buffers of one parameter block with its own step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamBuffer {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamBuffer {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Grow to `n` entries; new entries start with zero moments.
    pub fn resize(&mut self, n: usize) {
        self.m.resize(n, 0.0);
        self.v.resize(n, 0.0);
    }

    /// One Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, cfg: &AdamConfig) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam buffer holds {} entries, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        Ok(())
    }
}

/// Optimizer state of a reconstruction: four Gaussian groups with one shared
/// counter each, and per-slice motion buffers (slices outside a minibatch are
/// not stepped).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub centers: AdamBuffer,
    pub rotations: AdamBuffer,
    pub log_scales: AdamBuffer,
    pub intensities: AdamBuffer,
    pub motion_rotation: Vec<AdamBuffer>,
    pub motion_translation: Vec<AdamBuffer>,
}

impl AdamState {
    pub fn new(n_gaussians: usize, n_slices: usize) -> Self {
        Self {
            centers: AdamBuffer::new(3 * n_gaussians),
            rotations: AdamBuffer::new(4 * n_gaussians),
            log_scales: AdamBuffer::new(3 * n_gaussians),
            intensities: AdamBuffer::new(n_gaussians),
            motion_rotation: vec![AdamBuffer::new(3); n_slices],
            motion_translation: vec![AdamBuffer::new(3); n_slices],
        }
    }

    pub fn n_gaussians(&self) -> usize {
        self.intensities.len()
    }

    pub fn n_slices(&self) -> usize {
        self.motion_rotation.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.intensities.len();
        let groups = [
            ("centers", &self.centers, 3 * n),
            ("rotations", &self.rotations, 4 * n),
            ("log_scales", &self.log_scales, 3 * n),
        ];
        for (name, buf, len) in groups {
            if buf.m.len() != len || buf.v.len() != len {
                return Err(Error::validation(format!("adam.{name}"), format!("expected {len} entries")));
            }
        }
        if self.intensities.v.len() != n {
            return Err(Error::validation("adam.intensities", "moment buffers differ in length"));
        }
        if self.motion_rotation.len() != self.motion_translation.len() {
            return Err(Error::validation("adam.motion", "rotation and translation buffers differ in count"));
        }
        for b in self.motion_rotation.iter().chain(&self.motion_translation) {
            if b.m.len() != 3 || b.v.len() != 3 {
                return Err(Error::validation("adam.motion", "each slice buffer holds 3 entries"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut b = AdamBuffer::new(2);
        let mut p = [1.0, -2.0];
        b.step(&mut p, &[0.0, 0.0], 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(p, [1.0, -2.0]);
        assert_eq!(b.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut b = AdamBuffer::new(1);
        let mut p = [0.0];
        b.step(&mut p, &[2.0], 0.1, &AdamConfig::default()).unwrap();
        assert!((p[0] + 0.1).abs() <= 1e-8 * 0.1);
    }

    #[test]
    fn quadratic_converges() {
        let mut b = AdamBuffer::new(1);
        let mut w = [0.0];
        let cfg = AdamConfig::default();
        for _ in 0..2000 {
            let g = [2.0 * (w[0] - 3.0)];
            b.step(&mut w, &g, 0.05, &cfg).unwrap();
        }
        assert!((w[0] - 3.0).abs() < 1e-3, "{}", w[0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut b = AdamBuffer::new(2);
        assert!(b.step(&mut [0.0], &[0.0], 0.1, &AdamConfig::default()).is_err());
    }
}
