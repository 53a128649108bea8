//! Self-supervised loss: per-slice L1 and D-SSIM plus TV on the rendered volume.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// D-SSIM weight.
    pub lambda1: f64,
    /// TV weight.
    pub lambda2: f64,
    /// SSIM window width in pixels (odd).
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    /// Dynamic range L of the normalized intensities.
    pub dynamic_range: f64,
    /// Voxel dimensions of the random TV crops.
    pub tv_crop: [usize; 3],
    /// Evaluate TV over the whole reconstruction grid instead of crops.
    pub tv_full_grid: bool,
    pub seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.2,
            lambda2: 1e-4,
            ssim_window: 11,
            ssim_sigma: 1.5,
            dynamic_range: 1.0,
            tv_crop: [64, 64, 64],
            tv_full_grid: false,
            seed: 0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("loss.lambda1", self.lambda1), ("loss.lambda2", self.lambda2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        if self.ssim_window == 0 || self.ssim_window.is_multiple_of(2) {
            return Err(Error::validation("loss.ssim_window", format!("must be odd, got {}", self.ssim_window)));
        }
        if !(self.ssim_sigma.is_finite() && self.ssim_sigma > 0.0) {
            return Err(Error::validation("loss.ssim_sigma", format!("must be > 0, got {}", self.ssim_sigma)));
        }
        if !(self.dynamic_range.is_finite() && self.dynamic_range > 0.0) {
            return Err(Error::validation("loss.dynamic_range", format!("must be > 0, got {}", self.dynamic_range)));
        }
        if let Some(a) = self.tv_crop.iter().position(|&d| d == 0) {
            return Err(Error::validation(format!("loss.tv_crop[{a}]"), "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SliceLoss {
    pub l1: f64,
    pub dssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    /// Mean over slices.
    pub l1: f64,
    /// Mean over slices.
    pub dssim: f64,
    pub tv: f64,
    #[serde(skip)]
    pub per_slice: Vec<SliceLoss>,
}

impl LossReport {
    /// total = mean_i (l1_i + λ1·dssim_i) + λ2·tv.
    pub fn combine(per_slice: Vec<SliceLoss>, tv: f64, cfg: &LossConfig) -> Self {
        let n = per_slice.len().max(1) as f64;
        let data: f64 = per_slice.iter().map(|s| s.l1 + cfg.lambda1 * s.dssim).sum::<f64>() / n;
        let l1 = per_slice.iter().map(|s| s.l1).sum::<f64>() / n;
        let dssim = per_slice.iter().map(|s| s.dssim).sum::<f64>() / n;
        Self {
            total: data + cfg.lambda2 * tv,
            l1,
            dssim,
            tv,
            per_slice,
        }
    }
}

fn check_dims(a: &[f64], b: &[f64], rows: usize, cols: usize) -> Result<()> {
    let n = rows.checked_mul(cols).ok_or_else(|| Error::Shape("image dimensions overflow".into()))?;
    if a.len() != n || b.len() != n {
        return Err(Error::Shape(format!("images of {} and {} pixels, expected {rows}x{cols}", a.len(), b.len())));
    }
    Ok(())
}

/// Mean absolute difference and its (sub)gradient with respect to `b`.
pub fn l1_loss(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>)> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("images of {} and {} pixels", a.len(), b.len())));
    }
    if a.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = a.len() as f64;
    let loss = a.iter().zip(b).map(|(x, y)| (y - x).abs()).sum::<f64>() / n;
    let grad = a
        .iter()
        .zip(b)
        .map(|(x, y)| match y.partial_cmp(x) {
            Some(std::cmp::Ordering::Greater) => 1.0 / n,
            Some(std::cmp::Ordering::Less) => -1.0 / n,
            _ => 0.0,
        })
        .collect();
    Ok((loss, grad))
}

/// Normalized 1D Gaussian window.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let w: Vec<f64> = (0..size).map(|i| (-0.5 * ((i as f64 - half) / sigma).powi(2)).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Separable "same" convolution with zero padding. The kernel is symmetric,
/// so this operator is its own adjoint.
fn blur(img: &[f64], rows: usize, cols: usize, k: &[f64]) -> Vec<f64> {
    let h = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; img.len()];
    for r in 0..rows {
        for c in 0..cols {
            let mut s = 0.0;
            for (i, w) in k.iter().enumerate() {
                let cc = c as isize + i as isize - h;
                if cc >= 0 && (cc as usize) < cols {
                    s += w * img[r * cols + cc as usize];
                }
            }
            tmp[r * cols + c] = s;
        }
    }
    let mut out = vec![0.0; img.len()];
    for r in 0..rows {
        for c in 0..cols {
            let mut s = 0.0;
            for (i, w) in k.iter().enumerate() {
                let rr = r as isize + i as isize - h;
                if rr >= 0 && (rr as usize) < rows {
                    s += w * tmp[rr as usize * cols + c];
                }
            }
            out[r * cols + c] = s;
        }
    }
    out
}

fn ssim_constants(cfg: &LossConfig) -> (f64, f64) {
    ((0.01 * cfg.dynamic_range).powi(2), (0.03 * cfg.dynamic_range).powi(2))
}

/// Mean windowed SSIM and its gradient with respect to `b`.
pub fn ssim(a: &[f64], b: &[f64], rows: usize, cols: usize, cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    check_dims(a, b, rows, cols)?;
    if a.is_empty() {
        return Ok((1.0, Vec::new()));
    }
    let k = gaussian_window(cfg.ssim_window, cfg.ssim_sigma);
    let (c1, c2) = ssim_constants(cfg);
    let sq = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = blur(a, rows, cols, &k);
    let mu_b = blur(b, rows, cols, &k);
    let m_aa = blur(&sq(a, a), rows, cols, &k);
    let m_bb = blur(&sq(b, b), rows, cols, &k);
    let m_ab = blur(&sq(a, b), rows, cols, &k);

    let n = a.len();
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut d_mu = vec![0.0; n];
    let mut d_bb = vec![0.0; n];
    let mut d_ab = vec![0.0; n];
    for p in 0..n {
        let (ma, mb) = (mu_a[p], mu_b[p]);
        let va = m_aa[p] - ma * ma;
        let vb = m_bb[p] - mb * mb;
        let cov = m_ab[p] - ma * mb;
        let a1 = 2.0 * ma * mb + c1;
        let a2 = 2.0 * cov + c2;
        let b1 = ma * ma + mb * mb + c1;
        let b2 = va + vb + c2;
        let den = b1 * b2;
        let s = a1 * a2 / den;
        total += s;
        d_mu[p] = inv_n * (2.0 * ma * (a2 - a1) / den - s * 2.0 * mb * (b2 - b1) / den);
        d_bb[p] = inv_n * (-s * b1 / den);
        d_ab[p] = inv_n * (2.0 * a1 / den);
    }
    let g_mu = blur(&d_mu, rows, cols, &k);
    let g_bb = blur(&d_bb, rows, cols, &k);
    let g_ab = blur(&d_ab, rows, cols, &k);
    let grad = (0..n).map(|q| g_mu[q] + 2.0 * b[q] * g_bb[q] + a[q] * g_ab[q]).collect();
    Ok((total * inv_n, grad))
}

/// D-SSIM = (1 − SSIM)/2 and its gradient with respect to `b`.
pub fn dssim_loss(a: &[f64], b: &[f64], rows: usize, cols: usize, cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    let (s, g) = ssim(a, b, rows, cols, cfg)?;
    Ok(((1.0 - s) / 2.0, g.into_iter().map(|v| -0.5 * v).collect()))
}

/// Anisotropic TV: Σ over axes of the mean |forward difference| along that
/// axis. Differences across the boundary are zero (zero flux) and are not
/// counted. Voxels are stored like [`crate::volume::VoxelVolume`] (last axis
/// fastest). Returns the value and its gradient with respect to the voxels.
pub fn tv_loss(data: &[f64], dims: [usize; 3]) -> Result<(f64, Vec<f64>)> {
    let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    if n != Some(data.len()) {
        return Err(Error::Shape(format!("{} voxels for dims {dims:?}", data.len())));
    }
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut grad = vec![0.0; data.len()];
    let mut total = 0.0;
    for axis in 0..3 {
        if dims[axis] < 2 {
            continue;
        }
        let count = (data.len() / dims[axis] * (dims[axis] - 1)) as f64;
        let st = strides[axis];
        let mut sum = 0.0;
        for a in 0..dims[0] {
            for b in 0..dims[1] {
                for c in 0..dims[2] {
                    let pos = [a, b, c];
                    if pos[axis] + 1 >= dims[axis] {
                        continue;
                    }
                    let i = (a * dims[1] + b) * dims[2] + c;
                    let d = data[i + st] - data[i];
                    sum += d.abs();
                    let s = if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    grad[i + st] += s / count;
                    grad[i] -= s / count;
                }
            }
        }
        total += sum / count;
    }
    Ok((total, grad))
}

/// One acquired/rendered slice pair.
#[derive(Clone, Copy, Debug)]
pub struct SlicePair<'a> {
    pub acquired: &'a [f64],
    pub rendered: &'a [f64],
    pub rows: usize,
    pub cols: usize,
}

/// Gradients of the total loss with respect to each rendered slice and the
/// TV volume.
#[derive(Clone, Debug, Default)]
pub struct LossGrads {
    pub slices: Vec<Vec<f64>>,
    pub volume: Vec<f64>,
}

/// Full objective: mean over slices of (L1 + λ1·D-SSIM) plus λ2·TV of the
/// given volume (skipped when `volume` is `None`).
pub fn total_loss(pairs: &[SlicePair], volume: Option<(&[f64], [usize; 3])>, cfg: &LossConfig) -> Result<(LossReport, LossGrads)> {
    let inv_n = 1.0 / pairs.len().max(1) as f64;
    let per: Vec<(SliceLoss, Vec<f64>)> = pairs
        .par_iter()
        .map(|p| {
            let (l1, g1) = l1_loss(p.acquired, p.rendered)?;
            let (ds, gd) = if cfg.lambda1 > 0.0 {
                dssim_loss(p.acquired, p.rendered, p.rows, p.cols, cfg)?
            } else {
                check_dims(p.acquired, p.rendered, p.rows, p.cols)?;
                (0.0, vec![0.0; p.rendered.len()])
            };
            let grad = g1.iter().zip(&gd).map(|(a, b)| inv_n * (a + cfg.lambda1 * b)).collect();
            Ok((SliceLoss { l1, dssim: ds }, grad))
        })
        .collect::<Result<_>>()?;
    let (per_slice, slices): (Vec<_>, Vec<_>) = per.into_iter().unzip();

    let (tv, volume_grad) = match volume {
        Some((data, dims)) if cfg.lambda2 > 0.0 => {
            let (tv, g) = tv_loss(data, dims)?;
            (tv, g.into_iter().map(|v| cfg.lambda2 * v).collect())
        }
        Some((data, dims)) => (tv_loss(data, dims)?.0, vec![0.0; data.len()]),
        None => (0.0, Vec::new()),
    };
    Ok((
        LossReport::combine(per_slice, tv, cfg),
        LossGrads {
            slices,
            volume: volume_grad,
        },
    ))
}
