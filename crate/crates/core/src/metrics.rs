//! Reconstruction quality against ground truth: PSNR, SSIM, NRMSE, motion errors.

use nalgebra::{UnitQuaternion, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::SliceStack;
use crate::error::{Error, Result};
use crate::field::{render_volume, GaussianSet};
use crate::motion::{geodesic_errors, so3_exp, so3_log, RigidTransform};
use crate::objective::gaussian_window;
use crate::volume::VoxelVolume;

/// Reported PSNR for identical volumes.
pub const PSNR_CAP: f64 = 99.0;

fn check_same_grid(a: &VoxelVolume, b: &VoxelVolume) -> Result<()> {
    if a.grid.dims != b.grid.dims || a.data.len() != b.data.len() {
        return Err(Error::Shape(format!("volumes {:?} and {:?} differ in shape", a.grid.dims, b.grid.dims)));
    }
    Ok(())
}

fn check_mask(mask: Option<&[bool]>, n: usize) -> Result<()> {
    match mask {
        Some(m) if m.len() != n => Err(Error::Shape(format!("mask has {} entries for {n} voxels", m.len()))),
        _ => Ok(()),
    }
}

fn masked_pairs<'a>(a: &'a VoxelVolume, b: &'a VoxelVolume, mask: Option<&'a [bool]>) -> impl Iterator<Item = (f64, f64)> + 'a {
    a.data
        .iter()
        .zip(&b.data)
        .enumerate()
        .filter(move |(i, _)| mask.is_none_or(|m| m[*i]))
        .map(|(_, (x, y))| (*x, *y))
}

/// Mean squared error over the mask (all voxels when `None`).
pub fn mse(reference: &VoxelVolume, test: &VoxelVolume, mask: Option<&[bool]>) -> Result<f64> {
    check_same_grid(reference, test)?;
    check_mask(mask, reference.data.len())?;
    let (sum, n) = masked_pairs(reference, test, mask).fold((0.0, 0usize), |(s, n), (x, y)| (s + (x - y) * (x - y), n + 1));
    if n == 0 {
        return Err(Error::validation("mask", "selects no voxels"));
    }
    Ok(sum / n as f64)
}

/// 10·log10(peak²/MSE), capped at [`PSNR_CAP`].
pub fn psnr(reference: &VoxelVolume, test: &VoxelVolume, peak: f64, mask: Option<&[bool]>) -> Result<f64> {
    if !(peak.is_finite() && peak > 0.0) {
        return Err(Error::validation("peak", format!("must be > 0, got {peak}")));
    }
    let m = mse(reference, test, mask)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP))
}

/// RMSE divided by the reference intensity range over the mask.
pub fn nrmse(reference: &VoxelVolume, test: &VoxelVolume, mask: Option<&[bool]>) -> Result<f64> {
    let m = mse(reference, test, mask)?;
    let (lo, hi) = masked_pairs(reference, test, mask).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (x, _)| (lo.min(x), hi.max(x)));
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(Error::validation("reference", "intensity range is zero"));
    }
    Ok(m.sqrt() / range)
}

/// Separable zero-padded "same" 3D convolution with a symmetric kernel.
fn blur3(data: &[f64], dims: [usize; 3], k: &[f64]) -> Vec<f64> {
    let strides = [dims[1] * dims[2], dims[2], 1];
    let h = (k.len() / 2) as isize;
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let n = dims[axis] as isize;
        let st = strides[axis];
        let next: Vec<f64> = (0..cur.len())
            .into_par_iter()
            .map(|i| {
                let pos = ((i / st) % dims[axis]) as isize;
                let mut s = 0.0;
                for (t, w) in k.iter().enumerate() {
                    let q = pos + t as isize - h;
                    if q >= 0 && q < n {
                        s += w * cur[(i as isize + (q - pos) * st as isize) as usize];
                    }
                }
                s
            })
            .collect();
        cur = next;
    }
    cur
}

/// Mean local SSIM with a 3D Gaussian window, averaged over the mask.
pub fn ssim3d(
    reference: &VoxelVolume,
    test: &VoxelVolume,
    window: usize,
    sigma: f64,
    dynamic_range: f64,
    mask: Option<&[bool]>,
) -> Result<f64> {
    check_same_grid(reference, test)?;
    check_mask(mask, reference.data.len())?;
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::validation("window", "must be odd"));
    }
    if !(sigma > 0.0 && dynamic_range > 0.0) {
        return Err(Error::validation("sigma", "sigma and dynamic range must be > 0"));
    }
    let dims = reference.grid.dims;
    let k = gaussian_window(window, sigma);
    let (a, b) = (&reference.data, &test.data);
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = blur3(a, dims, &k);
    let mu_b = blur3(b, dims, &k);
    let m_aa = blur3(&prod(a, a), dims, &k);
    let m_bb = blur3(&prod(b, b), dims, &k);
    let m_ab = blur3(&prod(a, b), dims, &k);
    let c1 = (0.01 * dynamic_range).powi(2);
    let c2 = (0.03 * dynamic_range).powi(2);
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..a.len() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = m_aa[i] - ma * ma;
        let vb = m_bb[i] - mb * mb;
        let cov = m_ab[i] - ma * mb;
        sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        n += 1;
    }
    if n == 0 {
        return Err(Error::validation("mask", "selects no voxels"));
    }
    Ok(sum / n as f64)
}

/// Voxels with positive intensity, dilated by `radius` voxels (box neighbourhood).
pub fn support_mask(volume: &VoxelVolume, radius: usize) -> Vec<bool> {
    let d = volume.grid.dims;
    let r = radius as isize;
    let inside = |a: isize, b: isize, c: isize| a >= 0 && b >= 0 && c >= 0 && (a as usize) < d[0] && (b as usize) < d[1] && (c as usize) < d[2];
    let mut mask = vec![false; volume.data.len()];
    for a in 0..d[0] {
        for b in 0..d[1] {
            for c in 0..d[2] {
                if volume.at(a, b, c) <= 0.0 {
                    continue;
                }
                for da in -r..=r {
                    for db in -r..=r {
                        for dc in -r..=r {
                            let (x, y, z) = (a as isize + da, b as isize + db, c as isize + dc);
                            if inside(x, y, z) {
                                mask[volume.grid.flat(x as usize, y as usize, z as usize)] = true;
                            }
                        }
                    }
                }
            }
        }
    }
    mask
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub mean: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        Self {
            median,
            mean: v.iter().sum::<f64>() / n as f64,
            max: v[n - 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionReport {
    pub rotation_deg: Summary,
    pub translation_mm: Summary,
    /// Per-slice errors after gauge alignment.
    pub per_slice: Vec<(f64, f64)>,
    /// Global rigid transform applied to the estimate before comparison.
    pub gauge: RigidTransform,
}

/// Geodesic L1 median of rotations (Weiszfeld iterations in the tangent space).
pub fn rotation_median(rotations: &[UnitQuaternion<f64>]) -> UnitQuaternion<f64> {
    let Some(first) = rotations.first() else {
        return UnitQuaternion::identity();
    };
    // Start from the sign-aligned quaternion average.
    let mut acc = nalgebra::Quaternion::new(0.0, 0.0, 0.0, 0.0);
    for q in rotations {
        let q = q.quaternion();
        acc += if q.dot(first.quaternion()) < 0.0 { -q } else { *q };
    }
    let mut m = if acc.norm() > 1e-12 { UnitQuaternion::new_normalize(acc) } else { *first };
    for _ in 0..200 {
        let mut num = Vector3::zeros();
        let mut den = 0.0;
        for q in rotations {
            let v = so3_log(&(q * m.inverse()));
            let n = v.norm();
            if n > 1e-12 {
                num += v / n;
                den += 1.0 / n;
            }
        }
        if den == 0.0 {
            break;
        }
        let step = num / den;
        m = so3_exp(&step) * m;
        if step.norm() < 1e-13 {
            break;
        }
    }
    // Weiszfeld crawls towards a median that sits on a data point; test those directly.
    rotations
        .iter()
        .find(|c| is_vertex_median(rotations.iter().map(|q| so3_log(&(q * c.inverse())))))
        .copied()
        .unwrap_or(m)
}

/// Optimality of a data point as an L1 median: the unit vectors towards the
/// other points sum to at most its multiplicity. `offsets` are the points
/// relative to the candidate.
fn is_vertex_median(offsets: impl Iterator<Item = Vector3<f64>>) -> bool {
    let mut pull = Vector3::zeros();
    let mut multiplicity = 0.0;
    for v in offsets {
        let n = v.norm();
        if n > 1e-12 {
            pull += v / n;
        } else {
            multiplicity += 1.0;
        }
    }
    pull.norm() <= multiplicity
}

/// Geometric median of points (Weiszfeld).
pub fn geometric_median(points: &[Vector3<f64>]) -> Vector3<f64> {
    if points.is_empty() {
        return Vector3::zeros();
    }
    let mut m = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    for _ in 0..200 {
        let mut num = Vector3::zeros();
        let mut den = 0.0;
        for p in points {
            let n = (p - m).norm();
            if n > 1e-12 {
                num += p / n;
                den += 1.0 / n;
            }
        }
        if den == 0.0 {
            break;
        }
        let next = num / den;
        let moved = (next - m).norm();
        m = next;
        if moved < 1e-13 {
            break;
        }
    }
    points.iter().find(|c| is_vertex_median(points.iter().map(|p| p - *c))).copied().unwrap_or(m)
}

/// Per-slice pose errors after removing the global gauge. `truth` and
/// `estimate` are absolute slice poses (slice-local → world); the gauge G
/// minimizing the median discrepancy is applied to the estimate first.
pub fn motion_report(truth: &[RigidTransform], estimate: &[RigidTransform]) -> Result<MotionReport> {
    if truth.len() != estimate.len() {
        return Err(Error::Shape(format!("{} true poses, {} estimates", truth.len(), estimate.len())));
    }
    let rel: Vec<UnitQuaternion<f64>> = truth.iter().zip(estimate).map(|(t, e)| t.rotation * e.rotation.inverse()).collect();
    let g_rot = rotation_median(&rel);
    let offsets: Vec<Vector3<f64>> = truth.iter().zip(estimate).map(|(t, e)| t.translation - g_rot * e.translation).collect();
    let gauge = RigidTransform::new(g_rot, geometric_median(&offsets));
    let per_slice: Vec<(f64, f64)> = truth.iter().zip(estimate).map(|(t, e)| geodesic_errors(t, &gauge.compose(e))).collect();
    let rot: Vec<f64> = per_slice.iter().map(|p| p.0).collect();
    let tr: Vec<f64> = per_slice.iter().map(|p| p.1).collect();
    Ok(MotionReport {
        rotation_deg: Summary::of(&rot),
        translation_mm: Summary::of(&tr),
        per_slice,
        gauge,
    })
}

/// Absolute slice poses (slice-local → world) of `stacks` under per-slice
/// motion `transforms` in stack-then-slice order.
pub fn slice_poses(stacks: &SliceStack, transforms: &[RigidTransform]) -> Result<Vec<RigidTransform>> {
    if transforms.len() != stacks.n_slices() {
        return Err(Error::Shape(format!("{} transforms for {} slices", transforms.len(), stacks.n_slices())));
    }
    Ok(stacks.slices().zip(transforms).map(|(s, t)| s.geometry.absolute_pose(t)).collect())
}

/// Rigid map about `center`: x ↦ center + R(x − center) + t.
fn rigid_about(center: &Vector3<f64>, p: &[f64; 6]) -> (nalgebra::Matrix3<f64>, Vector3<f64>) {
    let r = so3_exp(&Vector3::new(p[0], p[1], p[2])).to_rotation_matrix().into_inner();
    let t = Vector3::new(p[3], p[4], p[5]);
    (r, center + t - r * center)
}

/// Resample `moving` on `reference`'s grid through the rigid map `params`
/// (axis-angle, translation) about the reference grid center.
pub fn resample_rigid(moving: &VoxelVolume, reference: &VoxelVolume, params: &[f64; 6]) -> VoxelVolume {
    let (r, t) = rigid_about(&reference.grid.center(), params);
    let data = reference.grid.points().par_iter().map(|x| moving.sample(&(r * x + t))).collect();
    VoxelVolume {
        grid: reference.grid,
        data,
        intensity_scale: moving.intensity_scale,
    }
}

/// Rigid intensity registration of `moving` onto `reference` by least squares
/// over the mask: exhaustive search over small rotations (±`max_angle_deg`
/// per axis, three steps), then coordinate pattern search over all six
/// parameters. Returns (axis-angle, translation) about the grid center.
pub fn register_rigid(reference: &VoxelVolume, moving: &VoxelVolume, mask: Option<&[bool]>, max_angle_deg: f64) -> Result<[f64; 6]> {
    check_mask(mask, reference.data.len())?;
    let pts_all = reference.grid.points();
    // Every other voxel along each axis keeps the cost cheap.
    let d = reference.grid.dims;
    let mut pts = Vec::new();
    let mut vals = Vec::new();
    for a in (0..d[0]).step_by(2) {
        for b in (0..d[1]).step_by(2) {
            for c in (0..d[2]).step_by(2) {
                let i = reference.grid.flat(a, b, c);
                if mask.is_none_or(|m| m[i]) {
                    pts.push(pts_all[i]);
                    vals.push(reference.data[i]);
                }
            }
        }
    }
    if pts.is_empty() {
        return Err(Error::validation("mask", "selects no voxels"));
    }
    let center = reference.grid.center();
    let cost = |p: &[f64; 6]| -> f64 {
        let (r, t) = rigid_about(&center, p);
        pts.iter().zip(&vals).map(|(x, v)| (moving.sample(&(r * x + t)) - v).powi(2)).sum::<f64>()
    };

    let a = max_angle_deg.to_radians();
    let mut best = [0.0; 6];
    let mut best_cost = cost(&best);
    for &rx in &[-a, 0.0, a] {
        for &ry in &[-a, 0.0, a] {
            for &rz in &[-a, 0.0, a] {
                let p = [rx, ry, rz, 0.0, 0.0, 0.0];
                let c = cost(&p);
                if c < best_cost {
                    best_cost = c;
                    best = p;
                }
            }
        }
    }

    let spacing = reference.grid.spacing.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut steps = [a.max(1e-3) / 2.0, a.max(1e-3) / 2.0, a.max(1e-3) / 2.0, spacing, spacing, spacing];
    let min_steps = [1e-4, 1e-4, 1e-4, 1e-3 * spacing, 1e-3 * spacing, 1e-3 * spacing];
    for _ in 0..400 {
        let mut improved = false;
        for k in 0..6 {
            for sign in [1.0, -1.0] {
                let mut p = best;
                p[k] += sign * steps[k];
                let c = cost(&p);
                if c < best_cost {
                    best_cost = c;
                    best = p;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            steps.iter_mut().for_each(|s| *s *= 0.5);
            if steps.iter().zip(&min_steps).all(|(s, m)| s < m) {
                break;
            }
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VolumeMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub nrmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// Metrics inside the truth's support mask, before registration.
    pub raw: VolumeMetrics,
    /// Metrics after rigid intensity registration onto the truth.
    pub registered: VolumeMetrics,
    /// Axis-angle (rad) and translation (mm) found by the registration.
    pub registration: [f64; 6],
    /// Metrics after mapping the reconstruction through the slice-pose gauge.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gauge_aligned: Option<VolumeMetrics>,
    /// Errors of the nominal (motion-free) poses.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion_initial: Option<MotionReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion: Option<MotionReport>,
}

fn volume_metrics(truth: &VoxelVolume, test: &VoxelVolume, mask: &[bool]) -> Result<VolumeMetrics> {
    let (_, peak) = truth.min_max();
    Ok(VolumeMetrics {
        psnr: psnr(truth, test, peak.max(f64::MIN_POSITIVE), Some(mask))?,
        ssim: ssim3d(truth, test, 11, 1.5, peak.max(f64::MIN_POSITIVE), Some(mask))?,
        nrmse: nrmse(truth, test, Some(mask))?,
    })
}

/// Raw and registered PSNR/SSIM/NRMSE inside the truth's support mask
/// (positive voxels dilated by 2), with the truth maximum as peak and range.
pub fn evaluate_volume(truth: &VoxelVolume, test: &VoxelVolume) -> Result<EvaluationReport> {
    check_same_grid(truth, test)?;
    let mask = support_mask(truth, 2);
    let raw = volume_metrics(truth, test, &mask)?;
    let registration = register_rigid(truth, test, Some(&mask), 4.0)?;
    let aligned = resample_rigid(test, truth, &registration);
    let registered = volume_metrics(truth, &aligned, &mask)?;
    Ok(EvaluationReport {
        raw,
        registered,
        registration,
        gauge_aligned: None,
        motion_initial: None,
        motion: None,
    })
}

/// Volume metrics of `recon` rendered on the truth grid and, when the true
/// motion is known, motion errors and gauge-aligned volume metrics.
pub fn evaluate_reconstruction(
    truth: &VoxelVolume,
    recon: &GaussianSet,
    stacks: &SliceStack,
    truth_transforms: Option<&[RigidTransform]>,
    estimate: &[RigidTransform],
) -> Result<EvaluationReport> {
    let mut report = evaluate_volume(truth, &render_volume(recon, &truth.grid)?)?;
    if let Some(truth_transforms) = truth_transforms {
        let truth_poses = slice_poses(stacks, truth_transforms)?;
        let nominal = slice_poses(stacks, &vec![RigidTransform::identity(); stacks.n_slices()])?;
        let motion = motion_report(&truth_poses, &slice_poses(stacks, estimate)?)?;
        let aligned = render_volume(&recon.transformed(&motion.gauge.rotation, &motion.gauge.translation), &truth.grid)?;
        report.gauge_aligned = Some(volume_metrics(truth, &aligned, &support_mask(truth, 2))?);
        report.motion_initial = Some(motion_report(&truth_poses, &nominal)?);
        report.motion = Some(motion);
    }
    Ok(report)
}
