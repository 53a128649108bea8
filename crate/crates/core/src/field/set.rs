use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of one anisotropic Gaussian primitive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian {
    pub center: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    /// Per-axis standard deviations stored as natural logarithms of millimetres.
    pub log_scale: Vector3<f64>,
    pub intensity: f64,
}

impl Gaussian {
    pub fn isotropic(center: Vector3<f64>, sigma: f64, intensity: f64) -> Self {
        Self {
            center,
            rotation: UnitQuaternion::identity(),
            log_scale: Vector3::repeat(sigma.ln()),
            intensity,
        }
    }

    pub fn scales(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    /// Σ = R S² Rᵀ.
    pub fn covariance(&self) -> Matrix3<f64> {
        let r = self.rotation.to_rotation_matrix().into_inner();
        let s2 = Matrix3::from_diagonal(&self.scales().map(|s| s * s));
        r * s2 * r.transpose()
    }

    /// Σ⁻¹ = R S⁻² Rᵀ, built from the factorization.
    pub fn inverse_covariance(&self) -> Matrix3<f64> {
        let r = self.rotation.to_rotation_matrix().into_inner();
        let inv_s2 = Matrix3::from_diagonal(&self.log_scale.map(|l| (-2.0 * l).exp()));
        r * inv_s2 * r.transpose()
    }

    /// Radius of the hard support cutoff: three times the largest axis scale.
    pub fn support_radius(&self) -> f64 {
        3.0 * self.log_scale.max().exp()
    }
}

/// The reconstructed volume: a structure-of-arrays collection of Gaussian primitives.
///
/// Rotations are stored as `[w, x, y, z]` quaternions and kept at unit norm by
/// [`GaussianSet::normalize_rotations`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GaussianSet {
    pub centers: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub intensities: Vec<f64>,
}

impl GaussianSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            centers: Vec::with_capacity(n),
            rotations: Vec::with_capacity(n),
            log_scales: Vec::with_capacity(n),
            intensities: Vec::with_capacity(n),
        }
    }

    pub fn from_gaussians(gaussians: impl IntoIterator<Item = Gaussian>) -> Self {
        let mut set = Self::new();
        for g in gaussians {
            set.push(g);
        }
        set
    }

    pub fn len(&self) -> usize {
        self.intensities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intensities.is_empty()
    }

    pub fn push(&mut self, g: Gaussian) {
        let q = g.rotation.quaternion();
        self.centers.push(g.center.into());
        self.rotations.push([q.w, q.i, q.j, q.k]);
        self.log_scales.push(g.log_scale.into());
        self.intensities.push(g.intensity);
    }

    pub fn extend_from(&mut self, other: &GaussianSet) {
        self.centers.extend_from_slice(&other.centers);
        self.rotations.extend_from_slice(&other.rotations);
        self.log_scales.extend_from_slice(&other.log_scales);
        self.intensities.extend_from_slice(&other.intensities);
    }

    pub fn get(&self, j: usize) -> Gaussian {
        let [w, x, y, z] = self.rotations[j];
        Gaussian {
            center: Vector3::from(self.centers[j]),
            rotation: UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)),
            log_scale: Vector3::from(self.log_scales[j]),
            intensity: self.intensities[j],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Gaussian> + '_ {
        (0..self.len()).map(move |j| self.get(j))
    }

    pub fn support_radius(&self, j: usize) -> f64 {
        let ls = self.log_scales[j];
        3.0 * ls[0].max(ls[1]).max(ls[2]).exp()
    }

    pub fn normalize_rotations(&mut self) {
        for q in &mut self.rotations {
            let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if n > 0.0 && n.is_finite() {
                q.iter_mut().for_each(|c| *c /= n);
            } else {
                *q = [1.0, 0.0, 0.0, 0.0];
            }
        }
    }

    /// The field pushed forward by the rigid map x ↦ R·x + t.
    pub fn transformed(&self, rotation: &UnitQuaternion<f64>, translation: &Vector3<f64>) -> GaussianSet {
        GaussianSet::from_gaussians(self.iter().map(|g| Gaussian {
            center: rotation * g.center + translation,
            rotation: rotation * g.rotation,
            ..g
        }))
    }

    /// Clamp every log-scale into `[ln(min), ln(max)]`.
    pub fn clamp_scales(&mut self, scale_min: f64, scale_max: f64) {
        let (lo, hi) = (scale_min.ln(), scale_max.ln());
        for ls in self.log_scales.iter_mut().flatten() {
            *ls = ls.clamp(lo, hi);
        }
    }

    /// Axis-aligned box enclosing every primitive's support ball.
    pub fn support_bounds(&self) -> Option<Aabb> {
        let mut bounds: Option<Aabb> = None;
        for j in 0..self.len() {
            let c = Vector3::from(self.centers[j]);
            let r = Vector3::repeat(self.support_radius(j));
            let b = Aabb::new(c - r, c + r);
            bounds = Some(match bounds {
                Some(acc) => acc.union(&b),
                None => b,
            });
        }
        bounds
    }

    /// Check array lengths, finiteness, unit quaternions and the scale range.
    pub fn validate(&self, scale_min: f64, scale_max: f64) -> Result<()> {
        let n = self.len();
        if self.centers.len() != n || self.rotations.len() != n || self.log_scales.len() != n {
            return Err(Error::Shape(format!(
                "gaussian arrays disagree: centers {}, rotations {}, log_scales {}, intensities {}",
                self.centers.len(),
                self.rotations.len(),
                self.log_scales.len(),
                n
            )));
        }
        for j in 0..n {
            let q = self.rotations[j];
            let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::validation(
                    format!("rotations[{j}]"),
                    format!("quaternion norm {norm} is not unit"),
                ));
            }
            if !self.centers[j].iter().all(|c| c.is_finite()) || !self.intensities[j].is_finite() {
                return Err(Error::validation(format!("centers[{j}]"), "non-finite parameter"));
            }
            for &ls in &self.log_scales[j] {
                let s = ls.exp();
                if !(s > 0.0 && s >= scale_min * (1.0 - 1e-12) && s <= scale_max * (1.0 + 1e-12)) {
                    return Err(Error::validation(
                        format!("log_scales[{j}]"),
                        format!("scale {s} outside [{scale_min}, {scale_max}]"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Gradient accumulators with the same layout as a [`GaussianSet`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianGrads {
    pub centers: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub intensities: Vec<f64>,
}

impl GaussianGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            centers: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            log_scales: vec![[0.0; 3]; n],
            intensities: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.intensities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intensities.is_empty()
    }

    pub fn zero(&mut self) {
        self.centers.iter_mut().for_each(|c| *c = [0.0; 3]);
        self.rotations.iter_mut().for_each(|c| *c = [0.0; 4]);
        self.log_scales.iter_mut().for_each(|c| *c = [0.0; 3]);
        self.intensities.iter_mut().for_each(|c| *c = 0.0);
    }

    pub fn add_assign(&mut self, other: &GaussianGrads) {
        debug_assert_eq!(self.len(), other.len());
        add_flat(self.centers.as_flattened_mut(), other.centers.as_flattened());
        add_flat(self.rotations.as_flattened_mut(), other.rotations.as_flattened());
        add_flat(self.log_scales.as_flattened_mut(), other.log_scales.as_flattened());
        add_flat(&mut self.intensities, &other.intensities);
    }

    pub fn scale(&mut self, s: f64) {
        self.centers.as_flattened_mut().iter_mut().for_each(|v| *v *= s);
        self.rotations.as_flattened_mut().iter_mut().for_each(|v| *v *= s);
        self.log_scales.as_flattened_mut().iter_mut().for_each(|v| *v *= s);
        self.intensities.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_zero(&self) -> bool {
        self.centers.as_flattened().iter().all(|&v| v == 0.0)
            && self.rotations.as_flattened().iter().all(|&v| v == 0.0)
            && self.log_scales.as_flattened().iter().all(|&v| v == 0.0)
            && self.intensities.iter().all(|&v| v == 0.0)
    }
}

fn add_flat(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Axis-aligned box in world millimetres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Self {
            min: min.into(),
            max: max.into(),
        }
    }

    pub fn from_points(points: impl IntoIterator<Item = Vector3<f64>>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let (mut lo, mut hi) = (first, first);
        for p in it {
            lo = lo.inf(&p);
            hi = hi.sup(&p);
        }
        Some(Self::new(lo, hi))
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        let mut out = *self;
        for a in 0..3 {
            out.min[a] = out.min[a].min(other.min[a]);
            out.max[a] = out.max[a].max(other.max[a]);
        }
        out
    }

    pub fn extent(&self) -> Vector3<f64> {
        Vector3::from(self.max) - Vector3::from(self.min)
    }

    pub fn center(&self) -> Vector3<f64> {
        (Vector3::from(self.max) + Vector3::from(self.min)) * 0.5
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn is_finite(&self) -> bool {
        self.min.iter().chain(&self.max).all(|v| v.is_finite())
    }
}
