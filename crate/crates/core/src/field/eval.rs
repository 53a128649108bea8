//! Forward evaluation and analytic reverse mode of the Gaussian field.
//!
//! V(x) = Σ_j I_j exp(-½ (x-μ_j)ᵀ Σ_j⁻¹ (x-μ_j)), summed over primitives with
//! ‖x-μ_j‖ ≤ 3σ_j in ascending id order. Everything is evaluated through the
//! local coordinates u = Rᵀ(x-μ), so m = Σ_k u_k² / s_k² and no matrix is inverted.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rayon::prelude::*;

use super::index::SpatialIndex;
use super::set::{Gaussian, GaussianGrads, GaussianSet};
use crate::error::Result;
use crate::volume::{GridSpec, VoxelVolume};

/// Points per work item. Fixed, so the reduction order never depends on the
/// thread count.
const CHUNK: usize = 8192;

#[derive(Clone, Copy, Debug)]
struct Prepared {
    mu: Vector3<f64>,
    rot: Matrix3<f64>,
    inv_s2: Vector3<f64>,
    r2: f64,
    intensity: f64,
}

impl Prepared {
    fn new(center: [f64; 3], q: [f64; 4], log_scale: [f64; 3], intensity: f64) -> Self {
        let rot = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
            .to_rotation_matrix()
            .into_inner();
        let max_ls = log_scale[0].max(log_scale[1]).max(log_scale[2]);
        Self {
            mu: Vector3::from(center),
            rot,
            inv_s2: Vector3::from(log_scale).map(|l| (-2.0 * l).exp()),
            r2: 9.0 * (2.0 * max_ls).exp(),
            intensity,
        }
    }

    #[inline]
    fn value(&self, x: &Vector3<f64>) -> f64 {
        let d = x - self.mu;
        if d.norm_squared() > self.r2 {
            return 0.0;
        }
        let u = self.rot.tr_mul(&d);
        let m = u.component_mul(&u).dot(&self.inv_s2);
        self.intensity * (-0.5 * m).exp()
    }
}

/// I·exp(-½ dᵀΣ⁻¹d), exactly zero outside the 3σ ball.
pub fn eval_primitive(g: &Gaussian, x: &Vector3<f64>) -> f64 {
    let q = g.rotation.quaternion();
    Prepared::new(g.center.into(), [q.w, q.i, q.j, q.k], g.log_scale.into(), g.intensity).value(x)
}

/// A [`GaussianSet`] prepared for repeated evaluation against an index.
pub struct Field<'a> {
    set: &'a GaussianSet,
    index: &'a SpatialIndex,
    prims: Vec<Prepared>,
}

impl<'a> Field<'a> {
    pub fn new(set: &'a GaussianSet, index: &'a SpatialIndex) -> Self {
        debug_assert_eq!(set.len(), index.len(), "index was built for a different set");
        let prims = (0..set.len())
            .map(|j| Prepared::new(set.centers[j], set.rotations[j], set.log_scales[j], set.intensities[j]))
            .collect();
        Self { set, index, prims }
    }

    pub fn set(&self) -> &GaussianSet {
        self.set
    }

    #[inline]
    pub fn value(&self, x: &Vector3<f64>) -> f64 {
        let mut acc = 0.0;
        for &j in self.index.query(x) {
            acc += self.prims[j as usize].value(x);
        }
        acc
    }

    pub fn eval(&self, points: &[Vector3<f64>]) -> Vec<f64> {
        points
            .par_chunks(CHUNK)
            .flat_map_iter(|chunk| chunk.iter().map(|x| self.value(x)))
            .collect()
    }

    /// Accumulate `weight · ∂V(x)/∂θ` into `acc` and return `weight · ∂V(x)/∂x`.
    #[inline]
    pub(crate) fn accumulate(&self, x: &Vector3<f64>, weight: f64, acc: &mut GradAccumulator) -> Vector3<f64> {
        let mut grad_x = Vector3::zeros();
        if weight == 0.0 {
            return grad_x;
        }
        for &j in self.index.query(x) {
            let j = j as usize;
            let p = &self.prims[j];
            let d = x - p.mu;
            if d.norm_squared() > p.r2 {
                continue;
            }
            let u = p.rot.tr_mul(&d);
            let du = u.component_mul(&p.inv_s2);
            let e = (-0.5 * u.dot(&du)).exp();
            let wg = weight * p.intensity * e;
            let ad = p.rot * du;

            acc.intensity[j] += weight * e;
            let dmu = &mut acc.center[j];
            for k in 0..3 {
                dmu[k] += wg * ad[k];
                acc.log_scale[j][k] += wg * u[k] * du[k];
            }
            grad_x -= wg * ad;
            let dr = &mut acc.rot[j];
            for a in 0..3 {
                for b in 0..3 {
                    dr[3 * a + b] -= wg * d[a] * du[b];
                }
            }
        }
        grad_x
    }

    /// Reverse mode over a batch of points. Returns parameter gradients and the
    /// per-point spatial gradients `upstream_k · ∂V(x_k)/∂x`.
    pub fn backward(&self, points: &[Vector3<f64>], upstream: &[f64]) -> (GaussianGrads, Vec<Vector3<f64>>) {
        assert_eq!(points.len(), upstream.len(), "upstream gradients must align with points");
        let n = self.set.len();
        let parts: Vec<(GradAccumulator, Vec<Vector3<f64>>)> = points
            .par_chunks(CHUNK)
            .zip(upstream.par_chunks(CHUNK))
            .map(|(pts, up)| {
                let mut acc = GradAccumulator::zeros(n);
                let gx = pts.iter().zip(up).map(|(x, &w)| self.accumulate(x, w, &mut acc)).collect();
                (acc, gx)
            })
            .collect();
        let mut total = GradAccumulator::zeros(n);
        let mut grad_x = Vec::with_capacity(points.len());
        for (acc, gx) in parts {
            total.merge(&acc);
            grad_x.extend(gx);
        }
        (total.finish(self.set), grad_x)
    }
}

/// Raw per-primitive accumulators; rotation gradients are kept as ∂L/∂R and
/// mapped to the quaternion once per primitive in [`GradAccumulator::finish`].
#[derive(Clone, Debug)]
pub(crate) struct GradAccumulator {
    pub center: Vec<[f64; 3]>,
    pub rot: Vec<[f64; 9]>,
    pub log_scale: Vec<[f64; 3]>,
    pub intensity: Vec<f64>,
}

impl GradAccumulator {
    pub fn zeros(n: usize) -> Self {
        Self {
            center: vec![[0.0; 3]; n],
            rot: vec![[0.0; 9]; n],
            log_scale: vec![[0.0; 3]; n],
            intensity: vec![0.0; n],
        }
    }

    pub fn merge(&mut self, other: &GradAccumulator) {
        for (d, s) in self.center.as_flattened_mut().iter_mut().zip(other.center.as_flattened()) {
            *d += s;
        }
        for (d, s) in self.rot.as_flattened_mut().iter_mut().zip(other.rot.as_flattened()) {
            *d += s;
        }
        for (d, s) in self.log_scale.as_flattened_mut().iter_mut().zip(other.log_scale.as_flattened()) {
            *d += s;
        }
        for (d, s) in self.intensity.iter_mut().zip(&other.intensity) {
            *d += s;
        }
    }

    pub fn finish(self, set: &GaussianSet) -> GaussianGrads {
        let rotations = self
            .rot
            .iter()
            .zip(&set.rotations)
            .map(|(dr, q)| rotation_matrix_grad_to_quaternion(dr, q))
            .collect();
        GaussianGrads {
            centers: self.center,
            rotations,
            log_scales: self.log_scale,
            intensities: self.intensity,
        }
    }
}

/// Chain ∂L/∂R (row-major) through R(q/|q|) and project onto the tangent space at q.
pub(crate) fn rotation_matrix_grad_to_quaternion(dr: &[f64; 9], q: &[f64; 4]) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let g = |a: usize, b: usize| dr[3 * a + b];
    let dw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) + w * g(2, 1)
        - 2.0 * x * g(2, 2));
    let dy = 2.0 * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) + z * g(2, 1)
        - 2.0 * y * g(2, 2));
    let dz = 2.0 * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1) + y * g(1, 2) + x * g(2, 0)
        + y * g(2, 1));
    let grad = [dw, dx, dy, dz];
    let qn = [w, x, y, z];
    let radial: f64 = grad.iter().zip(&qn).map(|(a, b)| a * b).sum();
    // d/dq of f(q/|q|) at |q| = n is (I - q̂q̂ᵀ) ∇f / n.
    std::array::from_fn(|i| (grad[i] - radial * qn[i]) / n)
}

/// Field values at `points`; points without neighbours evaluate to zero.
pub fn eval_volume(set: &GaussianSet, index: &SpatialIndex, points: &[Vector3<f64>]) -> Vec<f64> {
    Field::new(set, index).eval(points)
}

/// Accumulate `Σ_k upstream_k ∂V(x_k)/∂θ` for every primitive parameter.
pub fn eval_volume_backward(
    set: &GaussianSet,
    index: &SpatialIndex,
    points: &[Vector3<f64>],
    upstream_grads: &[f64],
) -> GaussianGrads {
    Field::new(set, index).backward(points, upstream_grads).0
}

/// Materialize the field at every voxel center of `grid`.
pub fn rasterize_to_grid(set: &GaussianSet, index: &SpatialIndex, grid: &GridSpec) -> Result<VoxelVolume> {
    grid.validate()?;
    let data = eval_volume(set, index, &grid.points());
    VoxelVolume::from_data(*grid, data)
}

/// Rasterize `set` on `grid`, building a spatial index over the grid bounds.
pub fn render_volume(set: &GaussianSet, grid: &GridSpec) -> Result<VoxelVolume> {
    grid.validate()?;
    let index = crate::field::index::build_index(set, grid.bounds(), 0.5 * crate::field::index::default_cell_size(set))?;
    rasterize_to_grid(set, &index, grid)
}
