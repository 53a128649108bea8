//! Forward slice acquisition ŷ = D·B·T·x̂ and its reverse mode.
//!
//! T is applied as a point pullback (slice samples are mapped into the volume
//! frame), B as a quadrature over the PSF offsets, and D by evaluating only at
//! the slice's own pixel lattice.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::psf::{build_psf_with, PsfModel, PsfSpec};
use super::stack::{Slice, SliceStack, Stack, StackGeometry};
use crate::error::{Error, Result};
use crate::field::{build_index, default_cell_size, Field, GaussianGrads, GaussianSet};
use crate::motion::{so3_left_jacobian, MotionParams, RigidTransform, SliceGeometry};
use crate::volume::VoxelVolume;

/// One slice to render: geometry, current transform, PSF.
#[derive(Clone, Copy, Debug)]
pub struct SliceJob<'a> {
    pub geometry: SliceGeometry,
    pub transform: RigidTransform,
    pub psf: &'a PsfModel,
}

impl SliceJob<'_> {
    fn n_points(&self) -> usize {
        self.geometry.n_pixels() * self.psf.len()
    }

    /// World sample points, pixel-major with PSF samples innermost.
    fn push_points(&self, out: &mut Vec<Vector3<f64>>) {
        let g = &self.geometry;
        let rot = g.world_rotation(&self.transform);
        let origin = g.center() + self.transform.translation;
        let offsets: Vec<Vector3<f64>> = self.psf.offsets.iter().map(|o| rot * o).collect();
        let zero = Vector3::zeros();
        for r in 0..g.rows {
            for c in 0..g.cols {
                let base = origin + rot * g.local_point(r, c, &zero);
                out.extend(offsets.iter().map(|o| base + o));
            }
        }
    }

    /// `rotation · local` for every sample (the lever arm of the rotation gradient).
    fn lever_arms(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        let g = self.geometry;
        let rot = g.world_rotation(&self.transform);
        (0..g.rows).flat_map(move |r| {
            (0..g.cols).flat_map(move |c| self.psf.offsets.iter().map(move |o| rot * g.local_point(r, c, o)))
        })
    }
}

/// Sample points of a single slice.
pub fn slice_sample_points(geom: &SliceGeometry, t: &RigidTransform, psf: &PsfModel) -> Vec<Vector3<f64>> {
    let job = SliceJob {
        geometry: *geom,
        transform: *t,
        psf,
    };
    let mut pts = Vec::with_capacity(job.n_points());
    job.push_points(&mut pts);
    pts
}

fn all_points(jobs: &[SliceJob]) -> (Vec<Vector3<f64>>, Vec<usize>) {
    let mut starts = Vec::with_capacity(jobs.len() + 1);
    let total: usize = jobs.iter().map(SliceJob::n_points).sum();
    let mut pts = Vec::with_capacity(total);
    for job in jobs {
        starts.push(pts.len());
        job.push_points(&mut pts);
    }
    starts.push(pts.len());
    (pts, starts)
}

/// PSF-weighted reduction of per-sample values to pixels.
fn reduce_to_pixels(values: &[f64], psf: &PsfModel) -> Vec<f64> {
    values
        .chunks_exact(psf.len())
        .map(|s| s.iter().zip(&psf.weights).map(|(v, w)| v * w).sum())
        .collect()
}

/// Render several slices with one batched field evaluation.
pub fn forward_slices(field: &Field, jobs: &[SliceJob]) -> Vec<Vec<f64>> {
    let (pts, starts) = all_points(jobs);
    let values = field.eval(&pts);
    jobs.iter()
        .enumerate()
        .map(|(i, job)| reduce_to_pixels(&values[starts[i]..starts[i + 1]], job.psf))
        .collect()
}

/// ŷ(r, c) = Σ_k w_k V(T(pixel(r, c) + o_k)).
pub fn forward_slice(field: &Field, geom: &SliceGeometry, t: &RigidTransform, psf: &PsfModel) -> Vec<f64> {
    let job = SliceJob {
        geometry: *geom,
        transform: *t,
        psf,
    };
    forward_slices(field, std::slice::from_ref(&job)).pop().unwrap_or_default()
}

/// Reverse mode of [`forward_slices`].
///
/// `increments[i]` is the motion increment that produced `jobs[i].transform`
/// from its base; the returned motion gradients are with respect to those
/// increments (axis-angle then translation).
pub fn backward_slices(
    field: &Field,
    jobs: &[SliceJob],
    increments: &[MotionParams],
    upstream: &[Vec<f64>],
) -> Result<(GaussianGrads, Vec<[f64; 6]>)> {
    if jobs.len() != upstream.len() || jobs.len() != increments.len() {
        return Err(Error::Shape(format!(
            "{} jobs, {} increments, {} upstream images",
            jobs.len(),
            increments.len(),
            upstream.len()
        )));
    }
    for (job, up) in jobs.iter().zip(upstream) {
        if up.len() != job.geometry.n_pixels() {
            return Err(Error::Shape(format!("upstream has {} pixels, slice has {}", up.len(), job.geometry.n_pixels())));
        }
    }
    let (pts, starts) = all_points(jobs);
    let mut weights = Vec::with_capacity(pts.len());
    for (job, up) in jobs.iter().zip(upstream) {
        for &g in up {
            weights.extend(job.psf.weights.iter().map(|w| g * w));
        }
    }
    let (grads, grad_x) = field.backward(&pts, &weights);

    let motion = jobs
        .par_iter()
        .enumerate()
        .map(|(i, job)| {
            let gx = &grad_x[starts[i]..starts[i + 1]];
            let mut torque = Vector3::zeros();
            let mut force = Vector3::zeros();
            for (v, g) in job.lever_arms().zip(gx) {
                torque += v.cross(g);
                force += g;
            }
            let rot = so3_left_jacobian(&increments[i].axis_angle).tr_mul(&torque);
            [rot[0], rot[1], rot[2], force[0], force[1], force[2]]
        })
        .collect();
    Ok((grads, motion))
}

/// Gradients of `Σ upstream · ŷ` with respect to the Gaussian parameters and
/// the slice's six motion parameters (zero increment about `t`).
pub fn forward_slice_backward(
    field: &Field,
    geom: &SliceGeometry,
    t: &RigidTransform,
    psf: &PsfModel,
    upstream: &[f64],
) -> Result<(GaussianGrads, MotionParams)> {
    let job = SliceJob {
        geometry: *geom,
        transform: *t,
        psf,
    };
    let (grads, motion) = backward_slices(field, &[job], &[MotionParams::zero()], &[upstream.to_vec()])?;
    Ok((grads, MotionParams::from_array(motion[0])))
}

/// What the simulator samples.
#[derive(Clone, Copy, Debug)]
pub enum VolumeSource<'a> {
    /// Trilinear sampling of a voxel volume.
    Voxels(&'a VoxelVolume),
    /// Exact evaluation of a Gaussian field.
    Gaussians(&'a GaussianSet),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseModel {
    /// Standard deviation of additive Gaussian noise; 0 disables noise.
    pub sigma: f64,
    pub seed: u64,
}

/// Simulate acquired stacks. `transforms[s][k]` is the true motion of slice
/// `k` of stack `s`; it is recorded as ground truth while the slice's
/// estimate starts at the nominal geometry.
pub fn simulate_stack(
    source: VolumeSource,
    geoms: &[StackGeometry],
    transforms: &[Vec<RigidTransform>],
    psf: &PsfSpec,
    noise: NoiseModel,
) -> Result<SliceStack> {
    if geoms.len() != transforms.len() {
        return Err(Error::Shape(format!("{} stack geometries, {} transform lists", geoms.len(), transforms.len())));
    }
    for (s, (g, t)) in geoms.iter().zip(transforms).enumerate() {
        g.validate(&format!("stacks[{s}]"))?;
        if g.n_slices != t.len() {
            return Err(Error::Shape(format!("stack {s}: {} slices but {} transforms", g.n_slices, t.len())));
        }
    }
    if !(noise.sigma.is_finite() && noise.sigma >= 0.0) {
        return Err(Error::validation("noise.sigma", "must be finite and >= 0"));
    }

    let psfs = geoms
        .iter()
        .map(|g| build_psf_with(&g.slice(0), psf))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<SliceJob> = geoms
        .iter()
        .zip(transforms)
        .zip(&psfs)
        .flat_map(|((g, ts), p)| {
            ts.iter().enumerate().map(move |(k, t)| SliceJob {
                geometry: g.slice(k),
                transform: *t,
                psf: p,
            })
        })
        .collect();

    let mut images = match source {
        VolumeSource::Gaussians(set) => {
            let bounds = set
                .support_bounds()
                .unwrap_or_else(|| crate::field::Aabb::new(Vector3::zeros(), Vector3::zeros()));
            let index = build_index(set, bounds, default_cell_size(set))?;
            forward_slices(&Field::new(set, &index), &jobs)
        }
        VolumeSource::Voxels(vol) => {
            let (pts, starts) = all_points(&jobs);
            let values: Vec<f64> = pts.par_iter().map(|p| vol.sample(p)).collect();
            jobs.iter()
                .enumerate()
                .map(|(i, job)| reduce_to_pixels(&values[starts[i]..starts[i + 1]], job.psf))
                .collect()
        }
    };

    if noise.sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
        let normal = Normal::new(0.0, noise.sigma).map_err(|e| Error::validation("noise.sigma", e.to_string()))?;
        for img in &mut images {
            img.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        }
    }

    let mut images = images.into_iter();
    let stacks = geoms
        .iter()
        .zip(transforms)
        .map(|(g, ts)| Stack {
            geometry: *g,
            slices: ts
                .iter()
                .map(|t| Slice {
                    pixels: images.next().expect("one image per slice"),
                    transform: RigidTransform::identity(),
                    truth: Some(*t),
                })
                .collect(),
        })
        .collect();
    Ok(SliceStack::new(stacks))
}
