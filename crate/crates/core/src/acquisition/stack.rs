use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Aabb;
use crate::motion::{RigidTransform, SliceGeometry};

/// Shared geometry of a stack of parallel, equally spaced slices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackGeometry {
    pub in_plane_spacing: [f64; 2],
    pub rows: usize,
    pub cols: usize,
    pub slice_thickness: f64,
    pub slice_gap: f64,
    /// Slice-local → world rotation; the third column is the stack normal.
    pub orientation: UnitQuaternion<f64>,
    /// World position of the stack's middle.
    pub center: Vector3<f64>,
    pub n_slices: usize,
}

impl StackGeometry {
    pub fn slice(&self, k: usize) -> SliceGeometry {
        let normal = self.orientation * Vector3::z();
        let offset = (k as f64 - 0.5 * (self.n_slices as f64 - 1.0)) * self.slice_gap;
        SliceGeometry {
            in_plane_spacing: self.in_plane_spacing,
            rows: self.rows,
            cols: self.cols,
            slice_thickness: self.slice_thickness,
            slice_gap: self.slice_gap,
            nominal_pose: RigidTransform::new(self.orientation, self.center + offset * normal),
        }
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.orientation * Vector3::z()
    }

    pub fn validate(&self, prefix: &str) -> Result<()> {
        if self.n_slices == 0 {
            return Err(Error::validation(format!("{prefix}.n_slices"), "must be >= 1"));
        }
        self.slice(0).validate().map_err(|e| match e {
            Error::Validation { field, reason } => Error::Validation {
                field: format!("{prefix}.{}", field.trim_start_matches("geometry.")),
                reason,
            },
            other => other,
        })?;
        if !self.center.iter().all(|v| v.is_finite()) {
            return Err(Error::validation(format!("{prefix}.center"), "must be finite"));
        }
        Ok(())
    }

    /// Same stack sampled on a lattice `factor` times coarser in-plane.
    pub fn downsampled(&self, factor: usize) -> StackGeometry {
        let f = factor.max(1);
        StackGeometry {
            in_plane_spacing: [self.in_plane_spacing[0] * f as f64, self.in_plane_spacing[1] * f as f64],
            rows: self.rows.div_ceil(f),
            cols: self.cols.div_ceil(f),
            ..*self
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    /// Row-major `rows × cols` intensities.
    pub pixels: Vec<f64>,
    /// Current motion estimate.
    pub transform: RigidTransform,
    /// Ground-truth motion, when known (simulation).
    pub truth: Option<RigidTransform>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stack {
    pub geometry: StackGeometry,
    pub slices: Vec<Slice>,
}

/// All acquired stacks of one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceStack {
    pub stacks: Vec<Stack>,
    /// Pixels were divided by this factor during normalization.
    pub norm_scale: f64,
}

/// Flat view of one slice.
#[derive(Clone, Copy, Debug)]
pub struct SliceRef<'a> {
    pub stack: usize,
    pub index: usize,
    pub geometry: SliceGeometry,
    pub slice: &'a Slice,
}

impl SliceStack {
    pub fn new(stacks: Vec<Stack>) -> Self {
        Self { stacks, norm_scale: 1.0 }
    }

    pub fn n_slices(&self) -> usize {
        self.stacks.iter().map(|s| s.slices.len()).sum()
    }

    pub fn slices(&self) -> impl Iterator<Item = SliceRef<'_>> + '_ {
        self.stacks.iter().enumerate().flat_map(|(si, st)| {
            st.slices.iter().enumerate().map(move |(k, slice)| SliceRef {
                stack: si,
                index: k,
                geometry: st.geometry.slice(k),
                slice,
            })
        })
    }

    pub fn slices_mut(&mut self) -> impl Iterator<Item = &mut Slice> + '_ {
        self.stacks.iter_mut().flat_map(|s| s.slices.iter_mut())
    }

    pub fn transforms(&self) -> Vec<RigidTransform> {
        self.slices().map(|s| s.slice.transform).collect()
    }

    pub fn truths(&self) -> Option<Vec<RigidTransform>> {
        self.slices().map(|s| s.slice.truth).collect()
    }

    pub fn set_transforms(&mut self, transforms: &[RigidTransform]) -> Result<()> {
        if transforms.len() != self.n_slices() {
            return Err(Error::Shape(format!("{} transforms for {} slices", transforms.len(), self.n_slices())));
        }
        for (s, t) in self.slices_mut().zip(transforms) {
            s.transform = *t;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.stacks.is_empty() {
            return Err(Error::validation("stacks", "at least one stack is required"));
        }
        if !(self.norm_scale.is_finite() && self.norm_scale > 0.0) {
            return Err(Error::validation("norm_scale", "must be finite and > 0"));
        }
        for (si, st) in self.stacks.iter().enumerate() {
            let prefix = format!("stacks[{si}]");
            st.geometry.validate(&prefix)?;
            if st.slices.len() != st.geometry.n_slices {
                return Err(Error::validation(
                    format!("{prefix}.n_slices"),
                    format!("geometry declares {} slices, {} present", st.geometry.n_slices, st.slices.len()),
                ));
            }
            let npix = st.geometry.rows * st.geometry.cols;
            for (k, s) in st.slices.iter().enumerate() {
                if s.pixels.len() != npix {
                    return Err(Error::Shape(format!("{prefix}.slices[{k}] has {} pixels, expected {npix}", s.pixels.len())));
                }
                if !s.pixels.iter().all(|v| v.is_finite()) {
                    return Err(Error::validation(format!("{prefix}.slices[{k}].pixels"), "non-finite intensity"));
                }
            }
        }
        Ok(())
    }

    /// Nearest-rank percentile over every pixel of every slice.
    pub fn percentile(&self, p: f64) -> f64 {
        let mut all: Vec<f64> = self.slices().flat_map(|s| s.slice.pixels.iter().copied()).collect();
        if all.is_empty() {
            return 0.0;
        }
        all.sort_by(f64::total_cmp);
        let rank = ((p / 100.0) * all.len() as f64).ceil() as usize;
        all[rank.clamp(1, all.len()) - 1]
    }

    /// Divide pixels so the 99.5th percentile maps to 1; returns the factor used.
    pub fn normalize(&mut self) -> f64 {
        let p = self.percentile(99.5);
        let s = if p > 0.0 && p.is_finite() { p } else { 1.0 };
        for slice in self.slices_mut() {
            slice.pixels.iter_mut().for_each(|v| *v /= s);
        }
        self.norm_scale *= s;
        s
    }

    /// Box enclosing every slice's footprint (pixel extents ± half thickness)
    /// at the current transforms.
    pub fn union_bounds(&self) -> Option<Aabb> {
        let corners = self.slices().flat_map(|s| {
            let g = s.geometry;
            let hx = 0.5 * g.cols as f64 * g.in_plane_spacing[0];
            let hy = 0.5 * g.rows as f64 * g.in_plane_spacing[1];
            let hz = 0.5 * g.slice_thickness;
            let t = s.slice.transform;
            (0..8).map(move |c| {
                let l = Vector3::new(
                    if c & 1 == 0 { -hx } else { hx },
                    if c & 2 == 0 { -hy } else { hy },
                    if c & 4 == 0 { -hz } else { hz },
                );
                g.local_to_world(&t, &l)
            })
        });
        Aabb::from_points(corners)
    }

    /// Average `factor × factor` pixel blocks onto a coarser lattice sharing
    /// each slice's center. Transforms carry over unchanged.
    pub fn downsample(&self, factor: usize) -> SliceStack {
        if factor <= 1 {
            return self.clone();
        }
        let stacks = self
            .stacks
            .iter()
            .map(|st| {
                let fine = st.geometry;
                let coarse = fine.downsampled(factor);
                let row_map = block_map(fine.rows, coarse.rows, factor);
                let col_map = block_map(fine.cols, coarse.cols, factor);
                let slices = st
                    .slices
                    .iter()
                    .map(|s| {
                        let mut sum = vec![0.0; coarse.rows * coarse.cols];
                        let mut cnt = vec![0usize; coarse.rows * coarse.cols];
                        for r in 0..fine.rows {
                            for c in 0..fine.cols {
                                let k = row_map[r] * coarse.cols + col_map[c];
                                sum[k] += s.pixels[r * fine.cols + c];
                                cnt[k] += 1;
                            }
                        }
                        let pixels = sum.iter().zip(&cnt).map(|(&v, &n)| if n > 0 { v / n as f64 } else { 0.0 }).collect();
                        Slice {
                            pixels,
                            transform: s.transform,
                            truth: s.truth,
                        }
                    })
                    .collect();
                Stack { geometry: coarse, slices }
            })
            .collect();
        SliceStack {
            stacks,
            norm_scale: self.norm_scale,
        }
    }
}

/// For each fine index, the coarse cell whose footprint contains its center.
/// Works in doubled index units so the test is exact.
fn block_map(n_fine: usize, n_coarse: usize, f: usize) -> Vec<usize> {
    (0..n_fine)
        .map(|i| {
            let u2 = 2 * i as i64 - (n_fine as i64 - 1);
            (0..n_coarse)
                .find(|&k| {
                    let c2 = (2 * k as i64 - (n_coarse as i64 - 1)) * f as i64;
                    c2 - f as i64 <= u2 && u2 < c2 + f as i64
                })
                .unwrap_or(if u2 < 0 { 0 } else { n_coarse - 1 })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_stack(rows: usize, cols: usize, n: usize) -> SliceStack {
        let geometry = StackGeometry {
            in_plane_spacing: [1.0, 1.0],
            rows,
            cols,
            slice_thickness: 2.0,
            slice_gap: 2.0,
            orientation: UnitQuaternion::identity(),
            center: Vector3::zeros(),
            n_slices: n,
        };
        let slices = (0..n)
            .map(|k| Slice {
                pixels: (0..rows * cols).map(|i| (i + k) as f64).collect(),
                transform: RigidTransform::identity(),
                truth: None,
            })
            .collect();
        SliceStack::new(vec![Stack { geometry, slices }])
    }

    #[test]
    fn slice_positions_are_centered() {
        let s = small_stack(2, 2, 3);
        let g = s.stacks[0].geometry;
        assert_eq!(g.slice(0).center(), Vector3::new(0.0, 0.0, -2.0));
        assert_eq!(g.slice(1).center(), Vector3::zeros());
        assert_eq!(g.slice(2).center(), Vector3::new(0.0, 0.0, 2.0));
    }

    #[test]
    fn downsample_even_averages_blocks_and_keeps_centers() {
        let s = small_stack(4, 4, 1);
        let d = s.downsample(2);
        let g = d.stacks[0].geometry;
        assert_eq!((g.rows, g.cols), (2, 2));
        assert_eq!(g.in_plane_spacing, [2.0, 2.0]);
        // Block (0,0) covers pixels 0,1,4,5.
        assert_eq!(d.stacks[0].slices[0].pixels[0], 2.5);
        // Coarse pixel centers coincide with the centroid of their fine block.
        let fine = s.stacks[0].geometry.slice(0);
        let coarse = g.slice(0);
        let z = Vector3::zeros();
        let centroid = (fine.local_point(0, 0, &z) + fine.local_point(1, 1, &z)) * 0.5;
        assert!((coarse.local_point(0, 0, &z) - centroid).norm() < 1e-12);
    }

    #[test]
    fn downsample_odd_covers_every_pixel() {
        let s = small_stack(5, 3, 1);
        let d = s.downsample(2);
        let g = d.stacks[0].geometry;
        assert_eq!((g.rows, g.cols), (3, 2));
        let mut constant = s.clone();
        constant.slices_mut().for_each(|sl| sl.pixels.iter_mut().for_each(|v| *v = 0.25));
        assert!(constant.downsample(2).stacks[0].slices[0].pixels.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn normalize_maps_percentile_to_one() {
        let mut s = small_stack(10, 10, 2);
        let p = s.percentile(99.5);
        let f = s.normalize();
        assert_eq!(f, p);
        assert_eq!(s.percentile(99.5), 1.0);
        assert_eq!(s.norm_scale, p);
        // Idempotent on already normalized data.
        assert_eq!(s.normalize(), 1.0);
    }

    #[test]
    fn validate_catches_pixel_count() {
        let mut s = small_stack(3, 3, 2);
        assert!(s.validate().is_ok());
        s.stacks[0].slices[1].pixels.pop();
        assert!(s.validate().is_err());
        let mut s = small_stack(3, 3, 2);
        s.stacks[0].geometry.slice_thickness = -1.0;
        let err = s.validate().unwrap_err().to_string();
        assert!(err.contains("stacks[0].slice_thickness"), "{err}");
    }
}
