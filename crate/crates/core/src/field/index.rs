//! Uniform-grid acceleration structure for the bounded-support neighbour query.
//!
//! Every primitive is registered in each cell whose box comes within its
//! registered radius of the primitive center. Border cells are treated as
//! extending to infinity, so query points outside the bounds are clamped to
//! the nearest border cell without losing neighbours.

use nalgebra::Vector3;

use super::set::{Aabb, GaussianSet};
use crate::error::{Error, Result};

const MAX_CELLS: usize = 1 << 26;

#[derive(Clone, Debug)]
pub struct SpatialIndex {
    origin: [f64; 3],
    cell_size: f64,
    dims: [usize; 3],
    cell_start: Vec<u32>,
    ids: Vec<u32>,
    built_centers: Vec<[f64; 3]>,
    registered_radius: Vec<f64>,
}

/// Build an exact index (no drift margin).
pub fn build_index(set: &GaussianSet, bounds: Aabb, cell_size: f64) -> Result<SpatialIndex> {
    SpatialIndex::build(set, bounds, cell_size, 0.0)
}

/// Median of the support radii; the default cell edge.
pub fn default_cell_size(set: &GaussianSet) -> f64 {
    if set.is_empty() {
        return 1.0;
    }
    let mut r: Vec<f64> = (0..set.len()).map(|j| set.support_radius(j)).collect();
    r.sort_by(f64::total_cmp);
    r[r.len() / 2]
}

impl SpatialIndex {
    /// Build an index whose registration radius is padded by `margin` mm, so
    /// that it stays valid while centers drift and scales grow by up to that amount.
    pub fn build(set: &GaussianSet, bounds: Aabb, cell_size: f64, margin: f64) -> Result<Self> {
        if !bounds.is_finite() {
            return Err(Error::validation("index.bounds", "bounds must be finite"));
        }
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(Error::validation("index.cell_size", format!("must be finite and > 0, got {cell_size}")));
        }
        if !(margin.is_finite() && margin >= 0.0) {
            return Err(Error::validation("index.margin", "must be finite and >= 0"));
        }
        let mut dims = [1usize; 3];
        for a in 0..3 {
            let extent = bounds.max[a] - bounds.min[a];
            if extent < 0.0 {
                return Err(Error::validation("index.bounds", "max < min"));
            }
            dims[a] = ((extent / cell_size).ceil() as usize).max(1);
        }
        let n_cells = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= MAX_CELLS)
            .ok_or_else(|| Error::validation("index.cell_size", "grid would exceed the cell limit"))?;

        let mut index = SpatialIndex {
            origin: bounds.min,
            cell_size,
            dims,
            cell_start: Vec::new(),
            ids: Vec::new(),
            built_centers: set.centers.clone(),
            registered_radius: (0..set.len()).map(|j| set.support_radius(j) + margin).collect(),
        };

        // Two passes: count, then fill. Ids are visited in ascending order so each
        // cell list comes out sorted.
        let mut counts = vec![0u32; n_cells + 1];
        index.for_each_registration(|cell, _| counts[cell + 1] += 1);
        for c in 0..n_cells {
            counts[c + 1] += counts[c];
        }
        let mut cursor = counts.clone();
        let mut ids = vec![0u32; counts[n_cells] as usize];
        index.for_each_registration(|cell, j| {
            ids[cursor[cell] as usize] = j as u32;
            cursor[cell] += 1;
        });
        index.cell_start = counts;
        index.ids = ids;
        Ok(index)
    }

    fn for_each_registration(&self, mut f: impl FnMut(usize, usize)) {
        for (j, (c, &r)) in self.built_centers.iter().zip(&self.registered_radius).enumerate() {
            let mut lo = [0usize; 3];
            let mut hi = [0usize; 3];
            for a in 0..3 {
                lo[a] = self.axis_cell(a, c[a] - r);
                hi[a] = self.axis_cell(a, c[a] + r);
            }
            let r2 = r * r;
            for i in lo[0]..=hi[0] {
                let dx = self.axis_gap(0, i, c[0]);
                for k in lo[1]..=hi[1] {
                    let dy = self.axis_gap(1, k, c[1]);
                    for l in lo[2]..=hi[2] {
                        let dz = self.axis_gap(2, l, c[2]);
                        if dx * dx + dy * dy + dz * dz <= r2 {
                            f(self.flat(i, k, l), j);
                        }
                    }
                }
            }
        }
    }

    /// Distance along one axis from `x` to cell `i`, with border cells unbounded outward.
    fn axis_gap(&self, axis: usize, i: usize, x: f64) -> f64 {
        let lo = if i == 0 { f64::NEG_INFINITY } else { self.origin[axis] + i as f64 * self.cell_size };
        let hi = if i + 1 == self.dims[axis] {
            f64::INFINITY
        } else {
            self.origin[axis] + (i + 1) as f64 * self.cell_size
        };
        if x < lo {
            lo - x
        } else if x > hi {
            x - hi
        } else {
            0.0
        }
    }

    #[inline]
    fn axis_cell(&self, axis: usize, x: f64) -> usize {
        let t = ((x - self.origin[axis]) / self.cell_size).floor();
        if t.is_nan() || t <= 0.0 {
            0
        } else {
            (t as usize).min(self.dims[axis] - 1)
        }
    }

    #[inline]
    fn flat(&self, i: usize, k: usize, l: usize) -> usize {
        (i * self.dims[1] + k) * self.dims[2] + l
    }

    /// Candidate primitive ids for a point, ascending. A superset of every
    /// primitive whose registered ball contains `x`.
    #[inline]
    pub fn query(&self, x: &Vector3<f64>) -> &[u32] {
        let cell = self.flat(self.axis_cell(0, x[0]), self.axis_cell(1, x[1]), self.axis_cell(2, x[2]));
        let (s, e) = (self.cell_start[cell] as usize, self.cell_start[cell + 1] as usize);
        &self.ids[s..e]
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.registered_radius.len()
    }

    pub fn is_empty(&self) -> bool {
        self.registered_radius.is_empty()
    }

    /// Whether `set` can no longer be served by this index: the primitive count
    /// changed, or some primitive's current support ball escapes the ball it was
    /// registered with.
    pub fn is_stale(&self, set: &GaussianSet) -> bool {
        if set.len() != self.registered_radius.len() {
            return true;
        }
        (0..set.len()).any(|j| {
            let c = set.centers[j];
            let b = self.built_centers[j];
            let drift = ((c[0] - b[0]).powi(2) + (c[1] - b[1]).powi(2) + (c[2] - b[2]).powi(2)).sqrt();
            !(drift + set.support_radius(j) <= self.registered_radius[j])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::set::Gaussian;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube(h: f64) -> Aabb {
        Aabb::new(Vector3::repeat(-h), Vector3::repeat(h))
    }

    #[test]
    fn single_primitive_covers_its_ball() {
        let set = GaussianSet::from_gaussians([Gaussian::isotropic(Vector3::new(0.2, -0.1, 0.4), 1.0, 1.0)]);
        let idx = build_index(&set, cube(6.0), 1.0).unwrap();
        // Every point inside the 3 mm ball must see the primitive.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let d = Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            if d.norm() <= 3.0 {
                let x = Vector3::from(set.centers[0]) + d;
                assert_eq!(idx.query(&x), &[0]);
            }
        }
        // Far corner cell is untouched.
        assert!(idx.query(&Vector3::repeat(5.9)).is_empty());
    }

    #[test]
    fn query_at_center_contains_id() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let set = GaussianSet::from_gaussians((0..50).map(|_| {
            Gaussian::isotropic(
                Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)),
                rng.gen_range(0.2..1.5),
                1.0,
            )
        }));
        let idx = build_index(&set, cube(5.0), default_cell_size(&set)).unwrap();
        for j in 0..set.len() {
            assert!(idx.query(&Vector3::from(set.centers[j])).contains(&(j as u32)));
        }
    }

    #[test]
    fn out_of_bounds_primitives_and_queries_are_clamped() {
        let set = GaussianSet::from_gaussians([Gaussian::isotropic(Vector3::new(9.0, 0.0, 0.0), 1.0, 1.0)]);
        let idx = build_index(&set, cube(4.0), 1.0).unwrap();
        assert_eq!(idx.query(&Vector3::new(8.0, 0.0, 0.0)), &[0]);
        assert_eq!(idx.query(&Vector3::new(11.5, 0.5, -0.5)), &[0]);
    }

    #[test]
    fn rejects_bad_parameters() {
        let set = GaussianSet::new();
        assert!(build_index(&set, cube(1.0), 0.0).is_err());
        assert!(build_index(&set, cube(1.0), f64::NAN).is_err());
        let bad = Aabb { min: [0.0, 0.0, f64::INFINITY], max: [1.0; 3] };
        assert!(build_index(&set, bad, 1.0).is_err());
    }

    #[test]
    fn staleness_tracks_drift_and_growth() {
        let mut set = GaussianSet::from_gaussians([Gaussian::isotropic(Vector3::zeros(), 1.0, 1.0)]);
        let idx = SpatialIndex::build(&set, cube(5.0), 1.0, 0.5).unwrap();
        assert!(!idx.is_stale(&set));
        set.centers[0][0] = 0.4;
        assert!(!idx.is_stale(&set));
        set.centers[0][0] = 0.6;
        assert!(idx.is_stale(&set));
        set.centers[0][0] = 0.0;
        set.log_scales[0] = [0.2, 0.0, 0.0];
        assert!(idx.is_stale(&set));
    }
}
