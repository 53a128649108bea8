//! Initial primitive lattice and residual-driven insertion between stages.

use std::collections::HashMap;

use nalgebra::{UnitQuaternion, Vector3};

use crate::acquisition::{forward_slices, PsfModel, SliceJob, SliceStack};
use crate::error::{Error, Result};
use crate::field::{build_index, default_cell_size, Aabb, Field, Gaussian, GaussianSet};

/// Lattice dimensions with at most `budget` cells for a box of `extent`.
pub fn lattice_dims(extent: &Vector3<f64>, budget: usize) -> [usize; 3] {
    let longest = extent.max().max(f64::MIN_POSITIVE);
    let e = extent.map(|v| v.max(1e-6 * longest));
    let h = (e.x * e.y * e.z / budget as f64).cbrt();
    let mut n: [usize; 3] = std::array::from_fn(|a| ((e[a] / h).round() as usize).max(1));
    while n[0] * n[1] * n[2] > budget {
        // Coarsen the axis with the finest spacing.
        let a = (0..3)
            .filter(|&a| n[a] > 1)
            .min_by(|&a, &b| (e[a] / n[a] as f64).total_cmp(&(e[b] / n[b] as f64)))
            .expect("product > budget >= 1 implies some axis > 1");
        n[a] -= 1;
    }
    n
}

/// Lattice over the slice-union box: cell-center positions, isotropic scale
/// `scale_factor ×` the (geometric-mean) lattice spacing, identity rotations,
/// intensities from the mean of the nearest pixel of every slice whose slab
/// contains the center (0 where no slice does).
pub fn init_gaussians(stacks: &SliceStack, budget: usize, scale_factor: f64) -> Result<GaussianSet> {
    if budget < 8 {
        return Err(Error::validation("budget", format!("must be >= 8, got {budget}")));
    }
    if stacks.n_slices() == 0 {
        return Err(Error::validation("stacks", "no slices to initialize from"));
    }
    let bounds = stacks
        .union_bounds()
        .filter(Aabb::is_finite)
        .ok_or_else(|| Error::validation("stacks", "slice footprint is not finite"))?;
    let extent = bounds.extent();
    let n = lattice_dims(&extent, budget);
    let step = Vector3::from_fn(|a, _| extent[a] / n[a] as f64);
    let spacing = (step.x.max(1e-9) * step.y.max(1e-9) * step.z.max(1e-9)).cbrt();
    let sigma = scale_factor * spacing;

    let mut set = GaussianSet::with_capacity(n[0] * n[1] * n[2]);
    for k in 0..n[2] {
        for j in 0..n[1] {
            for i in 0..n[0] {
                let c = Vector3::from(bounds.min) + Vector3::new((i as f64 + 0.5) * step.x, (j as f64 + 0.5) * step.y, (k as f64 + 0.5) * step.z);
                set.push(Gaussian::isotropic(c, sigma, nearest_sample_mean(stacks, &c)));
            }
        }
    }
    Ok(set)
}

/// Mean of the nearest pixel over slices whose slab contains `p`.
fn nearest_sample_mean(stacks: &SliceStack, p: &Vector3<f64>) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for s in stacks.slices() {
        let g = &s.geometry;
        let l = g.world_to_local(&s.slice.transform, p);
        if l.z.abs() > 0.5 * g.slice_thickness {
            continue;
        }
        let col = l.x / g.in_plane_spacing[0] + 0.5 * (g.cols as f64 - 1.0);
        let row = l.y / g.in_plane_spacing[1] + 0.5 * (g.rows as f64 - 1.0);
        let (c, r) = (col.round(), row.round());
        if c < 0.0 || r < 0.0 || c >= g.cols as f64 || r >= g.rows as f64 {
            continue;
        }
        sum += s.slice.pixels[r as usize * g.cols + c as usize];
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Scale every intensity by h³ / ((2π)^{3/2} σ³), the reciprocal of the
/// density of an infinite lattice of unit Gaussians with spacing h.
pub fn apply_density_correction(set: &mut GaussianSet, lattice_spacing: f64) {
    for j in 0..set.len() {
        let s = set.get(j).scales();
        let volume = (2.0 * std::f64::consts::PI).powf(1.5) * s.x * s.y * s.z;
        let factor = (lattice_spacing.powi(3) / volume).min(1.0);
        set.intensities[j] *= factor;
    }
}

/// Geometric-mean lattice spacing used by [`init_gaussians`].
pub fn lattice_spacing(stacks: &SliceStack, budget: usize) -> Option<f64> {
    let e = stacks.union_bounds()?.extent();
    let n = lattice_dims(&e, budget.max(1));
    Some(((e.x / n[0] as f64).max(1e-9) * (e.y / n[1] as f64).max(1e-9) * (e.z / n[2] as f64).max(1e-9)).cbrt())
}

/// Carry `set` into a stage with a larger budget: primitives are kept and new
/// ones are placed at the pixels with the largest absolute residual, at least
/// the new lattice spacing apart (greedy), with the residual as intensity and
/// the scale of the nearest existing primitive.
///
/// `stacks` holds the acquired slices at the new stage's resolution with the
/// current transforms; `psfs[s]` is the PSF of stack `s`.
pub fn stage_transition(set: &GaussianSet, stacks: &SliceStack, psfs: &[PsfModel], budget: usize) -> Result<GaussianSet> {
    if budget <= set.len() {
        return Ok(set.clone());
    }
    if psfs.len() != stacks.stacks.len() {
        return Err(Error::Shape(format!("{} PSFs for {} stacks", psfs.len(), stacks.stacks.len())));
    }
    let jobs: Vec<SliceJob> = stacks
        .slices()
        .map(|s| SliceJob {
            geometry: s.geometry,
            transform: s.slice.transform,
            psf: &psfs[s.stack],
        })
        .collect();
    let rendered = if set.is_empty() {
        jobs.iter().map(|j| vec![0.0; j.geometry.n_pixels()]).collect()
    } else {
        let bounds = set.support_bounds().unwrap_or(Aabb::new(Vector3::zeros(), Vector3::zeros()));
        let index = build_index(set, bounds, default_cell_size(set))?;
        forward_slices(&Field::new(set, &index), &jobs)
    };

    // (|residual|, residual, world position), sorted by decreasing magnitude;
    // the sort is stable so ties keep acquisition order.
    let mut candidates: Vec<(f64, f64, Vector3<f64>)> = Vec::new();
    for (s, img) in stacks.slices().zip(&rendered) {
        let g = &s.geometry;
        for r in 0..g.rows {
            for c in 0..g.cols {
                let res = s.slice.pixels[r * g.cols + c] - img[r * g.cols + c];
                let p = g.local_to_world(&s.slice.transform, &g.local_point(r, c, &Vector3::zeros()));
                candidates.push((res.abs(), res, p));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0));

    let wanted = budget - set.len();
    let spacing = lattice_spacing(stacks, budget).unwrap_or(1.0);
    let min_sep2 = spacing * spacing;
    let mut taken = vec![false; candidates.len()];
    let mut chosen: Vec<(f64, Vector3<f64>)> = Vec::with_capacity(wanted);
    let cell = |p: &Vector3<f64>| -> [i64; 3] { std::array::from_fn(|a| (p[a] / spacing).floor() as i64) };
    let mut grid: HashMap<[i64; 3], Vec<Vector3<f64>>> = HashMap::new();
    for (i, &(_, res, p)) in candidates.iter().enumerate() {
        if chosen.len() == wanted {
            break;
        }
        let k = cell(&p);
        let clear = (-1..=1).all(|dx| {
            (-1..=1).all(|dy| {
                (-1..=1).all(|dz| {
                    grid.get(&[k[0] + dx, k[1] + dy, k[2] + dz])
                        .is_none_or(|pts| pts.iter().all(|q| (p - q).norm_squared() >= min_sep2))
                })
            })
        });
        if clear {
            grid.entry(k).or_default().push(p);
            chosen.push((res, p));
            taken[i] = true;
        }
    }
    // Not enough well-separated pixels: fill with the next-largest residuals.
    for (i, &(_, res, p)) in candidates.iter().enumerate() {
        if chosen.len() == wanted {
            break;
        }
        if !taken[i] {
            chosen.push((res, p));
        }
    }

    let mut out = set.clone();
    for (res, p) in chosen {
        let sigma = nearest_scale(set, &p).unwrap_or(0.75 * spacing).min(spacing);
        // Overlapping insertions at lattice spacing sum to roughly the residual.
        let overlap = (2.0 * std::f64::consts::PI).powf(1.5) * sigma.powi(3) / spacing.powi(3);
        out.push(Gaussian {
            center: p,
            rotation: UnitQuaternion::identity(),
            log_scale: Vector3::repeat(sigma.ln()),
            intensity: res * overlap.recip().min(1.0),
        });
    }
    Ok(out)
}

/// Geometric-mean scale of the primitive whose center is nearest to `p`.
fn nearest_scale(set: &GaussianSet, p: &Vector3<f64>) -> Option<f64> {
    let j = (0..set.len()).min_by(|&a, &b| {
        let da = (Vector3::from(set.centers[a]) - p).norm_squared();
        let db = (Vector3::from(set.centers[b]) - p).norm_squared();
        da.total_cmp(&db)
    })?;
    let ls = set.log_scales[j];
    Some(((ls[0] + ls[1] + ls[2]) / 3.0).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acquisition::{build_psf, Slice, Stack, StackGeometry};
    use crate::motion::RigidTransform;

    fn cube_stack(value: f64) -> SliceStack {
        // 4 slices of 4×4 unit pixels, thickness 1: footprint is a 4 mm cube.
        let geometry = StackGeometry {
            in_plane_spacing: [1.0, 1.0],
            rows: 4,
            cols: 4,
            slice_thickness: 1.0,
            slice_gap: 1.0,
            orientation: UnitQuaternion::identity(),
            center: Vector3::zeros(),
            n_slices: 4,
        };
        let slices = (0..4)
            .map(|_| Slice {
                pixels: vec![value; 16],
                transform: RigidTransform::identity(),
                truth: None,
            })
            .collect();
        SliceStack::new(vec![Stack { geometry, slices }])
    }

    #[test]
    fn budget_eight_gives_octant_centers() {
        let set = init_gaussians(&cube_stack(1.0), 8, 0.75).unwrap();
        assert_eq!(set.len(), 8);
        for c in &set.centers {
            assert!(c.iter().all(|v| (v.abs() - 1.0).abs() < 1e-12), "{c:?}");
        }
        let expected = (0.75f64 * 2.0).ln();
        assert!(set.log_scales.iter().all(|l| l.iter().all(|v| (v - expected).abs() < 1e-12)));
    }

    #[test]
    fn lattice_never_exceeds_budget() {
        for budget in [8, 9, 27, 100, 1000, 12345] {
            for e in [Vector3::new(1.0, 1.0, 1.0), Vector3::new(10.0, 3.0, 0.5), Vector3::new(96.0, 96.0, 80.0)] {
                let n = lattice_dims(&e, budget);
                assert!(n[0] * n[1] * n[2] <= budget);
            }
        }
    }

    #[test]
    fn seeded_intensities() {
        let zero = init_gaussians(&cube_stack(0.0), 64, 0.75).unwrap();
        assert!(zero.intensities.iter().all(|&v| v == 0.0));
        let c = init_gaussians(&cube_stack(0.37), 64, 0.75).unwrap();
        assert!(c.intensities.iter().all(|&v| (v - 0.37).abs() < 1e-6));
    }

    #[test]
    fn rejects_small_budget_and_empty_stacks() {
        assert!(init_gaussians(&cube_stack(1.0), 7, 0.75).is_err());
        assert!(init_gaussians(&SliceStack::new(vec![]), 8, 0.75).is_err());
    }

    fn psfs(stacks: &SliceStack) -> Vec<PsfModel> {
        stacks.stacks.iter().map(|s| build_psf(&s.geometry.slice(0), [1, 1, 1]).unwrap()).collect()
    }

    #[test]
    fn equal_budget_is_unchanged_and_zero_residual_inserts_zero() {
        let stacks = cube_stack(0.0);
        let set = init_gaussians(&stacks, 8, 0.75).unwrap();
        assert_eq!(stage_transition(&set, &stacks, &psfs(&stacks), 8).unwrap(), set);
        let grown = stage_transition(&set, &stacks, &psfs(&stacks), 20).unwrap();
        assert_eq!(grown.len(), 20);
        assert!(grown.intensities[8..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inserts_at_unexplained_blob() {
        let mut stacks = cube_stack(0.0);
        // Bright spot at pixel (1, 2) of slice 2.
        stacks.stacks[0].slices[2].pixels[4 + 2] = 5.0;
        let set = GaussianSet::from_gaussians([Gaussian::isotropic(Vector3::new(-1.5, -1.5, -1.5), 0.5, 0.0)]);
        let grown = stage_transition(&set, &stacks, &psfs(&stacks), 2).unwrap();
        let g = stacks.stacks[0].geometry.slice(2);
        let blob = g.local_to_world(&RigidTransform::identity(), &g.local_point(1, 2, &Vector3::zeros()));
        assert!((Vector3::from(grown.centers[1]) - blob).norm() < 2.0);
        assert_eq!(grown.intensities[1], 5.0);
    }
}
