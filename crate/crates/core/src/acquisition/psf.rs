use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::SliceGeometry;

/// σ = FWHM / (2√(2 ln 2)).
pub fn fwhm_to_sigma(fwhm: f64) -> f64 {
    fwhm / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt())
}

/// How the slice profile is discretized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsfSpec {
    /// Quadrature points along local x, y and the slice normal; each odd.
    pub samples_per_axis: [usize; 3],
    /// In-plane FWHM as a multiple of the pixel spacing.
    pub in_plane_fwhm_factor: f64,
    /// Through-plane FWHM as a multiple of the slice thickness.
    pub through_plane_fwhm_factor: f64,
}

impl Default for PsfSpec {
    fn default() -> Self {
        Self {
            samples_per_axis: [1, 1, 5],
            in_plane_fwhm_factor: 1.2,
            through_plane_fwhm_factor: 1.0,
        }
    }
}

impl PsfSpec {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        for (a, &n) in self.samples_per_axis.iter().enumerate() {
            if n == 0 || n % 2 == 0 {
                return Err(Error::validation(format!("{prefix}.samples_per_axis[{a}]"), format!("must be odd and >= 1, got {n}")));
            }
        }
        for (name, v) in [("in_plane_fwhm_factor", self.in_plane_fwhm_factor), ("through_plane_fwhm_factor", self.through_plane_fwhm_factor)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(format!("{prefix}.{name}"), format!("must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Anisotropic Gaussian slice profile discretized by a tensor-product rule.
#[derive(Clone, Debug, PartialEq)]
pub struct PsfModel {
    /// Standard deviations along local x, y and the normal, mm.
    pub sigma: [f64; 3],
    /// Sample offsets in the slice-local frame, mm.
    pub offsets: Vec<Vector3<f64>>,
    pub weights: Vec<f64>,
}

/// PSF with the default FWHM conventions.
pub fn build_psf(geom: &SliceGeometry, samples_per_axis: [usize; 3]) -> Result<PsfModel> {
    build_psf_with(
        geom,
        &PsfSpec {
            samples_per_axis,
            ..PsfSpec::default()
        },
    )
}

pub fn build_psf_with(geom: &SliceGeometry, spec: &PsfSpec) -> Result<PsfModel> {
    geom.validate()?;
    spec.validate("psf")?;
    let sigma = [
        fwhm_to_sigma(spec.in_plane_fwhm_factor * geom.in_plane_spacing[0]),
        fwhm_to_sigma(spec.in_plane_fwhm_factor * geom.in_plane_spacing[1]),
        fwhm_to_sigma(spec.through_plane_fwhm_factor * geom.slice_thickness),
    ];
    let axes: Vec<Vec<(f64, f64)>> = (0..3).map(|a| axis_rule(sigma[a], spec.samples_per_axis[a])).collect();

    let mut offsets = Vec::new();
    let mut weights = Vec::new();
    for &(x, wx) in &axes[0] {
        for &(y, wy) in &axes[1] {
            for &(z, wz) in &axes[2] {
                offsets.push(Vector3::new(x, y, z));
                weights.push(wx * wy * wz);
            }
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(PsfModel { sigma, offsets, weights })
}

/// Equally spaced nodes over ±2σ with Gaussian weights (unnormalized).
fn axis_rule(sigma: f64, n: usize) -> Vec<(f64, f64)> {
    if n == 1 {
        return vec![(0.0, 1.0)];
    }
    let half = (n / 2) as f64;
    (0..n)
        .map(|i| {
            let x = 2.0 * sigma * (i as f64 - half) / half;
            (x, (-0.5 * (x / sigma).powi(2)).exp())
        })
        .collect()
}

impl PsfModel {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::RigidTransform;

    fn geom(thickness: f64) -> SliceGeometry {
        SliceGeometry {
            in_plane_spacing: [1.0, 1.0],
            rows: 4,
            cols: 4,
            slice_thickness: thickness,
            slice_gap: thickness,
            nominal_pose: RigidTransform::identity(),
        }
    }

    #[test]
    fn fwhm_conversion() {
        assert!((fwhm_to_sigma(3.0) - 1.27398).abs() < 1e-5);
    }

    #[test]
    fn degenerate_rule() {
        let psf = build_psf(&geom(3.0), [1, 1, 1]).unwrap();
        assert_eq!(psf.offsets, vec![Vector3::zeros()]);
        assert_eq!(psf.weights, vec![1.0]);
    }

    #[test]
    fn through_plane_weights_match_direct_evaluation() {
        let psf = build_psf(&geom(3.0), [1, 1, 5]).unwrap();
        let sigma = fwhm_to_sigma(3.0);
        let raw: Vec<f64> = psf.offsets.iter().map(|o| (-o[2] * o[2] / (2.0 * sigma * sigma)).exp()).collect();
        let total: f64 = raw.iter().sum();
        for (w, r) in psf.weights.iter().zip(&raw) {
            assert!((w - r / total).abs() < 1e-15);
        }
        assert!((psf.offsets[0][2] + 2.0 * sigma).abs() < 1e-15);
        assert!((psf.offsets[4][2] - 2.0 * sigma).abs() < 1e-15);
    }

    #[test]
    fn weights_normalized_and_offsets_symmetric() {
        let psf = build_psf(&geom(2.7), [3, 5, 7]).unwrap();
        assert!((psf.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(psf.weights.iter().all(|&w| w > 0.0));
        let n = psf.len();
        for i in 0..n {
            assert!((psf.offsets[i] + psf.offsets[n - 1 - i]).norm() < 1e-12);
            assert!((psf.weights[i] - psf.weights[n - 1 - i]).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_even_or_zero_samples_and_bad_geometry() {
        assert!(build_psf(&geom(3.0), [1, 2, 5]).is_err());
        assert!(build_psf(&geom(3.0), [0, 1, 5]).is_err());
        assert!(build_psf(&geom(0.0), [1, 1, 5]).is_err());
    }
}
