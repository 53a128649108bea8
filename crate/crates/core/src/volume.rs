use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Aabb;

/// Regular voxel lattice. `origin` is the world position of voxel (0, 0, 0)'s center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: [f64; 3],
    pub spacing: [f64; 3],
    pub dims: [usize; 3],
}

impl GridSpec {
    /// A grid of `dims` voxels centered on the world origin.
    pub fn centered(dims: [usize; 3], spacing: [f64; 3]) -> Self {
        let origin = std::array::from_fn(|a| -0.5 * (dims[a] as f64 - 1.0) * spacing[a]);
        Self { origin, spacing, dims }
    }

    /// Smallest grid at isotropic `spacing` whose voxel centers cover `bounds`.
    pub fn covering(bounds: &Aabb, spacing: f64) -> Self {
        let c = bounds.center();
        let e = bounds.extent();
        let dims = std::array::from_fn(|a| ((e[a] / spacing).ceil() as usize + 1).max(1));
        let origin = std::array::from_fn(|a| c[a] - 0.5 * (dims[a] as f64 - 1.0) * spacing);
        Self {
            origin,
            spacing: [spacing; 3],
            dims,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.spacing[a].is_finite() && self.spacing[a] > 0.0) {
                return Err(Error::validation(format!("grid.spacing[{a}]"), format!("must be > 0, got {}", self.spacing[a])));
            }
            if self.dims[a] == 0 {
                return Err(Error::validation(format!("grid.dims[{a}]"), "must be >= 1"));
            }
            if !self.origin[a].is_finite() {
                return Err(Error::validation(format!("grid.origin[{a}]"), "must be finite"));
            }
        }
        self.checked_len()
            .map(|_| ())
            .ok_or_else(|| Error::validation("grid.dims", "voxel count overflows"))
    }

    pub fn checked_len(&self) -> Option<usize> {
        self.dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn flat(&self, a: usize, b: usize, c: usize) -> usize {
        (a * self.dims[1] + b) * self.dims[2] + c
    }

    #[inline]
    pub fn world(&self, a: usize, b: usize, c: usize) -> Vector3<f64> {
        Vector3::new(
            self.origin[0] + a as f64 * self.spacing[0],
            self.origin[1] + b as f64 * self.spacing[1],
            self.origin[2] + c as f64 * self.spacing[2],
        )
    }

    /// World positions of all voxel centers in storage order.
    pub fn points(&self) -> Vec<Vector3<f64>> {
        let mut pts = Vec::with_capacity(self.len());
        for a in 0..self.dims[0] {
            for b in 0..self.dims[1] {
                for c in 0..self.dims[2] {
                    pts.push(self.world(a, b, c));
                }
            }
        }
        pts
    }

    pub fn bounds(&self) -> Aabb {
        let last = self.world(self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1);
        Aabb::new(Vector3::from(self.origin), last)
    }

    pub fn center(&self) -> Vector3<f64> {
        self.bounds().center()
    }

    /// Sub-grid of `dims` voxels starting at voxel `start`.
    pub fn crop(&self, start: [usize; 3], dims: [usize; 3]) -> GridSpec {
        let o = self.world(start[0], start[1], start[2]);
        GridSpec {
            origin: o.into(),
            spacing: self.spacing,
            dims,
        }
    }
}

/// Dense scalar volume in row-major order (first axis slowest).
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelVolume {
    pub grid: GridSpec,
    pub data: Vec<f64>,
    /// Multiply stored values by this to recover acquisition units.
    pub intensity_scale: f64,
}

impl VoxelVolume {
    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            grid,
            data: vec![0.0; grid.len()],
            intensity_scale: 1.0,
        }
    }

    pub fn from_data(grid: GridSpec, data: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(Error::Shape(format!("volume payload {} != {} voxels", data.len(), grid.len())));
        }
        Ok(Self {
            grid,
            data,
            intensity_scale: 1.0,
        })
    }

    #[inline]
    pub fn at(&self, a: usize, b: usize, c: usize) -> f64 {
        self.data[self.grid.flat(a, b, c)]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Trilinear interpolation at a world point; zero outside the lattice.
    pub fn sample(&self, p: &Vector3<f64>) -> f64 {
        let g = &self.grid;
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let t = (p[a] - g.origin[a]) / g.spacing[a];
            if !(t >= 0.0 && t <= (g.dims[a] - 1) as f64) {
                return 0.0;
            }
            let i = (t.floor() as usize).min(g.dims[a].saturating_sub(2));
            base[a] = i;
            frac[a] = t - i as f64;
        }
        let mut acc = 0.0;
        for corner in 0..8 {
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let hi = (corner >> a) & 1 == 1;
                if g.dims[a] == 1 {
                    if hi {
                        w = 0.0;
                    }
                    idx[a] = 0;
                    continue;
                }
                idx[a] = base[a] + hi as usize;
                w *= if hi { frac[a] } else { 1.0 - frac[a] };
            }
            if w != 0.0 {
                acc += w * self.at(idx[0], idx[1], idx[2]);
            }
        }
        acc
    }
}
