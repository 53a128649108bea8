//! Synthetic ground truth: phantom volumes, motion trajectories and benchmark cases.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{simulate_stack, NoiseModel, PsfSpec, SliceStack, StackGeometry, VolumeSource};
use crate::error::{Error, Result};
use crate::field::{build_index, default_cell_size, rasterize_to_grid, Aabb, Gaussian, GaussianSet};
use crate::motion::{so3_exp, RigidTransform};
use crate::volume::{GridSpec, VoxelVolume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    GaussianMixture,
    NestedEllipsoids,
    CheckerSmooth,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: Vector3<f64>,
    pub semi_axes: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub intensity: f64,
}

impl Ellipsoid {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let u = self.rotation.inverse() * (p - self.center);
        u.component_div(&self.semi_axes).norm_squared() <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomParams {
    /// Number of blobs in the gaussian-mixture phantom.
    pub components: usize,
    /// Number of nested shells when `ellipsoids` is empty.
    pub shells: usize,
    /// Explicit ellipsoids, painted in order (later ones overwrite earlier ones).
    pub ellipsoids: Vec<Ellipsoid>,
    /// Period of the smooth checker pattern, mm.
    pub checker_period: f64,
    /// Radius of the phantom's support as a fraction of the half-extent of the grid.
    pub support_fraction: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            components: 24,
            shells: 4,
            ellipsoids: Vec::new(),
            checker_period: 16.0,
            support_fraction: 0.9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub kind: PhantomKind,
    pub params: PhantomParams,
    pub seed: u64,
    pub volume: VoxelVolume,
    /// Exact generating field (gaussian-mixture kind only).
    pub gaussians: Option<GaussianSet>,
}

fn random_rotation(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
    // Uniform on SO(3) via a normalized 4D Gaussian.
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-6 {
            return UnitQuaternion::new_normalize(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
        }
    }
}

/// Deterministic synthetic volume on a centered grid.
pub fn make_phantom(kind: PhantomKind, params: &PhantomParams, spacing: f64, dims: [usize; 3], seed: u64) -> Result<Phantom> {
    let grid = GridSpec::centered(dims, [spacing; 3]);
    grid.validate()?;
    if !(params.support_fraction > 0.0 && params.support_fraction <= 1.0) {
        return Err(Error::validation("phantom.support_fraction", "must be in (0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half: Vector3<f64> = Vector3::from_fn(|a, _| 0.5 * (dims[a] as f64 - 1.0) * spacing);
    let radius = params.support_fraction * half.min();

    let (volume, gaussians) = match kind {
        PhantomKind::GaussianMixture => {
            if params.components == 0 {
                return Err(Error::validation("phantom.components", "must be >= 1"));
            }
            let mut set = GaussianSet::with_capacity(params.components);
            for _ in 0..params.components {
                let sigma = Vector3::from_fn(|_, _| radius * rng.gen_range(0.06..0.16));
                // Keep each blob's 3σ support inside the phantom radius.
                let reach = radius - 3.0 * sigma.max();
                let center = loop {
                    let c = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
                    if c.norm() <= 1.0 {
                        break c * reach.max(0.0);
                    }
                };
                set.push(Gaussian {
                    center,
                    rotation: random_rotation(&mut rng),
                    log_scale: sigma.map(f64::ln),
                    intensity: rng.gen_range(0.3..1.0),
                });
            }
            let bounds = set.support_bounds().unwrap_or(Aabb::new(Vector3::zeros(), Vector3::zeros()));
            let index = build_index(&set, bounds, default_cell_size(&set))?;
            let peak = rasterize_to_grid(&set, &index, &grid)?.min_max().1;
            if peak > 0.0 {
                set.intensities.iter_mut().for_each(|v| *v /= peak);
            }
            let volume = rasterize_to_grid(&set, &index, &grid)?;
            (volume, Some(set))
        }
        PhantomKind::NestedEllipsoids => {
            let shells = if params.ellipsoids.is_empty() {
                random_shells(params.shells, radius, &mut rng)
            } else {
                params.ellipsoids.clone()
            };
            for (i, e) in shells.iter().enumerate() {
                if !(0.0..=1.0).contains(&e.intensity) || e.semi_axes.iter().any(|&s| !(s > 0.0)) {
                    return Err(Error::validation(format!("phantom.ellipsoids[{i}]"), "intensity must be in [0, 1] and semi-axes > 0"));
                }
            }
            let data = grid
                .points()
                .par_iter()
                .map(|p| shells.iter().rev().find(|e| e.contains(p)).map_or(0.0, |e| e.intensity))
                .collect();
            (VoxelVolume::from_data(grid, data)?, None)
        }
        PhantomKind::CheckerSmooth => {
            if !(params.checker_period.is_finite() && params.checker_period > 0.0) {
                return Err(Error::validation("phantom.checker_period", "must be > 0"));
            }
            let phase = Vector3::from_fn(|_, _| rng.gen_range(0.0..std::f64::consts::TAU));
            let k = std::f64::consts::TAU / params.checker_period;
            let sharp = 3.0f64;
            let data = grid
                .points()
                .par_iter()
                .map(|p| {
                    let r = p.norm() / radius;
                    if r >= 1.0 {
                        return 0.0;
                    }
                    let wave = (k * p.x + phase.x).sin() * (k * p.y + phase.y).sin() * (k * p.z + phase.z).sin();
                    let pattern = 0.55 + 0.4 * (sharp * wave).tanh() / sharp.tanh();
                    // Smooth roll-off over the outer 15 % of the radius.
                    let edge = ((1.0 - r) / 0.15).min(1.0);
                    pattern * edge * edge * (3.0 - 2.0 * edge)
                })
                .collect();
            (VoxelVolume::from_data(grid, data)?, None)
        }
    };
    Ok(Phantom {
        kind,
        params: params.clone(),
        seed,
        volume,
        gaussians,
    })
}

fn random_shells(n: usize, radius: f64, rng: &mut ChaCha8Rng) -> Vec<Ellipsoid> {
    let mut out = Vec::with_capacity(n);
    let rotation = random_rotation(rng);
    let mut axes = Vector3::new(1.0, 0.85, 0.75) * radius;
    let mut center = Vector3::zeros();
    for i in 0..n {
        out.push(Ellipsoid {
            center,
            semi_axes: axes,
            rotation,
            intensity: if i % 2 == 0 { rng.gen_range(0.6..1.0) } else { rng.gen_range(0.2..0.5) },
        });
        let shrink = rng.gen_range(0.55..0.75);
        let slack = axes * (1.0 - shrink) * 0.5;
        center += rotation * Vector3::from_fn(|a, _| rng.gen_range(-0.5..0.5) * slack[a]);
        axes *= shrink;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionModel {
    Independent,
    RandomWalk,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionAmplitude {
    /// Bound on each slice's rotation angle, degrees.
    pub max_rotation_deg: f64,
    /// Bound on each translation component, mm.
    pub max_translation_mm: f64,
    /// Random-walk per-step rotation bound, degrees.
    pub step_rotation_deg: f64,
    /// Random-walk per-step bound on each translation component, mm.
    pub step_translation_mm: f64,
}

impl MotionAmplitude {
    pub fn new(max_rotation_deg: f64, max_translation_mm: f64) -> Self {
        Self {
            max_rotation_deg,
            max_translation_mm,
            step_rotation_deg: max_rotation_deg / 4.0,
            step_translation_mm: max_translation_mm / 4.0,
        }
    }

    pub fn none() -> Self {
        Self::new(0.0, 0.0)
    }

    pub fn mild() -> Self {
        Self::new(2.0, 1.0)
    }

    pub fn moderate() -> Self {
        Self::new(5.0, 3.0)
    }

    pub fn severe() -> Self {
        Self::new(10.0, 6.0)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("motion.max_rotation_deg", self.max_rotation_deg),
            ("motion.max_translation_mm", self.max_translation_mm),
            ("motion.step_rotation_deg", self.step_rotation_deg),
            ("motion.step_translation_mm", self.step_translation_mm),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        if self.max_rotation_deg >= 180.0 {
            return Err(Error::validation("motion.max_rotation_deg", "must be < 180"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionTrajectory {
    pub transforms: Vec<RigidTransform>,
    pub amplitude: MotionAmplitude,
    pub model: MotionModel,
}

/// Uniform sample from the ball of radius `r` (rejection from the cube).
fn ball_sample(rng: &mut ChaCha8Rng, r: f64) -> Vector3<f64> {
    if r == 0.0 {
        return Vector3::zeros();
    }
    loop {
        let v = Vector3::from_fn(|_, _| rng.gen_range(-r..=r));
        if v.norm() <= r {
            return v;
        }
    }
}

fn cube_sample(rng: &mut ChaCha8Rng, r: f64) -> Vector3<f64> {
    if r == 0.0 {
        Vector3::zeros()
    } else {
        Vector3::from_fn(|_, _| rng.gen_range(-r..=r))
    }
}

/// Per-slice rigid motion in acquisition order.
pub fn make_trajectory(n_slices: usize, amplitude: MotionAmplitude, model: MotionModel, seed: u64) -> Result<MotionTrajectory> {
    amplitude.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_rot = amplitude.max_rotation_deg.to_radians();
    let max_t = amplitude.max_translation_mm;
    let mut transforms = Vec::with_capacity(n_slices);
    match model {
        MotionModel::Independent => {
            for _ in 0..n_slices {
                let aa = ball_sample(&mut rng, max_rot);
                let t = cube_sample(&mut rng, max_t);
                transforms.push(RigidTransform::new(so3_exp(&aa), t));
            }
        }
        MotionModel::RandomWalk => {
            let step_rot = amplitude.step_rotation_deg.to_radians();
            let step_t = amplitude.step_translation_mm;
            let mut aa = ball_sample(&mut rng, max_rot);
            let mut t = cube_sample(&mut rng, max_t);
            for k in 0..n_slices {
                if k > 0 {
                    aa += ball_sample(&mut rng, step_rot);
                    let n = aa.norm();
                    if n > max_rot {
                        aa *= max_rot / n;
                    }
                    t += cube_sample(&mut rng, step_t);
                    t = t.map(|v| v.clamp(-max_t, max_t));
                }
                transforms.push(RigidTransform::new(so3_exp(&aa), t));
            }
        }
    }
    Ok(MotionTrajectory {
        transforms,
        amplitude,
        model,
    })
}

/// Acquisition protocol for a benchmark case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    pub phantom_kind: PhantomKind,
    pub phantom: PhantomParams,
    pub volume_dims: [usize; 3],
    pub volume_spacing: f64,
    pub in_plane_spacing: f64,
    /// Rows and columns of every slice.
    pub slice_size: [usize; 2],
    /// Per-stack thickness drawn uniformly from this range, mm.
    pub thickness_range: [f64; 2],
    /// Per-stack slice count drawn uniformly from this inclusive range.
    pub slices_per_stack: [usize; 2],
    /// Slice spacing as a multiple of the thickness.
    pub gap_factor: f64,
    pub psf: PsfSpec,
    pub motion: MotionAmplitude,
    pub motion_model: MotionModel,
    pub noise_sigma: f64,
}

impl Protocol {
    /// 1/8-linear-scale replica of the clinical protocol.
    pub fn desk() -> Self {
        Self {
            phantom_kind: PhantomKind::GaussianMixture,
            phantom: PhantomParams::default(),
            volume_dims: [64; 3],
            volume_spacing: 1.6,
            in_plane_spacing: 2.0,
            slice_size: [48, 48],
            thickness_range: [4.0, 4.0],
            slices_per_stack: [16, 16],
            gap_factor: 1.0,
            psf: PsfSpec {
                samples_per_axis: [1, 1, 3],
                ..PsfSpec::default()
            },
            motion: MotionAmplitude::moderate(),
            motion_model: MotionModel::RandomWalk,
            noise_sigma: 0.0,
        }
    }

    /// Clinical-scale protocol: 1 mm in-plane, 128×128 slices, 2.5-3.5 mm
    /// thickness, three stacks of 15-30 slices, 0.8 mm volumes.
    pub fn paper() -> Self {
        Self {
            volume_dims: [128; 3],
            volume_spacing: 0.8,
            in_plane_spacing: 1.0,
            slice_size: [128, 128],
            thickness_range: [2.5, 3.5],
            slices_per_stack: [15, 30],
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.motion.validate()?;
        self.psf.validate("protocol.psf")?;
        let [t0, t1] = self.thickness_range;
        if !(t0.is_finite() && t1.is_finite() && t0 > 0.0 && t0 <= t1) {
            return Err(Error::validation("protocol.thickness_range", "must satisfy 0 < min <= max"));
        }
        let [n0, n1] = self.slices_per_stack;
        if n0 == 0 || n0 > n1 {
            return Err(Error::validation("protocol.slices_per_stack", "must satisfy 1 <= min <= max"));
        }
        if self.slice_size.contains(&0) {
            return Err(Error::validation("protocol.slice_size", "must be >= 1"));
        }
        for (name, v) in [
            ("protocol.volume_spacing", self.volume_spacing),
            ("protocol.in_plane_spacing", self.in_plane_spacing),
            ("protocol.gap_factor", self.gap_factor),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(name, format!("must be > 0, got {v}")));
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::validation("protocol.noise_sigma", "must be >= 0"));
        }
        GridSpec::centered(self.volume_dims, [self.volume_spacing; 3]).validate()
    }
}

/// Axial, coronal and sagittal stack orientations (slice-local → world).
pub fn orthogonal_orientations() -> [UnitQuaternion<f64>; 3] {
    let from_cols = |a: Vector3<f64>, b: Vector3<f64>, c: Vector3<f64>| {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[a, b, c])))
    };
    [
        UnitQuaternion::identity(),
        from_cols(Vector3::x(), Vector3::z(), -Vector3::y()),
        from_cols(Vector3::y(), Vector3::z(), Vector3::x()),
    ]
}

/// Seeds of every random stage of a case, derived from the case seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseSeeds {
    pub case: u64,
    pub geometry: u64,
    pub motion: u64,
    pub noise: u64,
}

impl CaseSeeds {
    pub fn derive(case: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        Self {
            case,
            geometry: rng.gen(),
            motion: rng.gen(),
            noise: rng.gen(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchmarkCase {
    pub stacks: SliceStack,
    pub truth_volume: VoxelVolume,
    pub truth_gaussians: Option<GaussianSet>,
    /// True per-slice motion in stack-then-slice order.
    pub truth_transforms: Vec<RigidTransform>,
    pub seeds: CaseSeeds,
}

/// Three orthogonal moving stacks of the phantom.
pub fn make_benchmark_case(phantom: &Phantom, protocol: &Protocol, seed: u64) -> Result<BenchmarkCase> {
    protocol.validate()?;
    let seeds = CaseSeeds::derive(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.geometry);
    let center = phantom.volume.grid.center();
    let geoms: Vec<StackGeometry> = orthogonal_orientations()
        .iter()
        .map(|&orientation| {
            let [t0, t1] = protocol.thickness_range;
            let thickness = if t0 == t1 { t0 } else { rng.gen_range(t0..=t1) };
            let [n0, n1] = protocol.slices_per_stack;
            StackGeometry {
                in_plane_spacing: [protocol.in_plane_spacing; 2],
                rows: protocol.slice_size[0],
                cols: protocol.slice_size[1],
                slice_thickness: thickness,
                slice_gap: thickness * protocol.gap_factor,
                orientation,
                center,
                n_slices: rng.gen_range(n0..=n1),
            }
        })
        .collect();
    let total: usize = geoms.iter().map(|g| g.n_slices).sum();
    let trajectory = make_trajectory(total, protocol.motion, protocol.motion_model, seeds.motion)?;
    let mut remaining = trajectory.transforms.as_slice();
    let per_stack: Vec<Vec<RigidTransform>> = geoms
        .iter()
        .map(|g| {
            let (head, tail) = remaining.split_at(g.n_slices);
            remaining = tail;
            head.to_vec()
        })
        .collect();
    let source = match &phantom.gaussians {
        Some(set) => VolumeSource::Gaussians(set),
        None => VolumeSource::Voxels(&phantom.volume),
    };
    let noise = NoiseModel {
        sigma: protocol.noise_sigma,
        seed: seeds.noise,
    };
    let stacks = simulate_stack(source, &geoms, &per_stack, &protocol.psf, noise)?;
    Ok(BenchmarkCase {
        stacks,
        truth_volume: phantom.volume.clone(),
        truth_gaussians: phantom.gaussians.clone(),
        truth_transforms: trajectory.transforms,
        seeds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{rotation_angle, so3_log};

    #[test]
    fn single_covering_ellipsoid_is_constant() {
        let params = PhantomParams {
            ellipsoids: vec![Ellipsoid {
                center: Vector3::zeros(),
                semi_axes: Vector3::repeat(100.0),
                rotation: UnitQuaternion::identity(),
                intensity: 0.6,
            }],
            ..PhantomParams::default()
        };
        let p = make_phantom(PhantomKind::NestedEllipsoids, &params, 2.0, [8, 8, 8], 0).unwrap();
        assert!(p.volume.data.iter().all(|&v| v == 0.6));
    }

    #[test]
    fn phantoms_are_reproducible_and_bounded() {
        for kind in [PhantomKind::GaussianMixture, PhantomKind::NestedEllipsoids, PhantomKind::CheckerSmooth] {
            let a = make_phantom(kind, &PhantomParams::default(), 2.0, [20, 18, 16], 5).unwrap();
            let b = make_phantom(kind, &PhantomParams::default(), 2.0, [20, 18, 16], 5).unwrap();
            assert_eq!(a.volume.data, b.volume.data);
            let (lo, hi) = a.volume.min_max();
            assert!(lo >= 0.0 && hi <= 1.0 + 1e-12 && hi > 0.1, "{kind:?}: {lo} {hi}");
        }
    }

    #[test]
    fn mixture_volume_is_its_rasterized_set() {
        let p = make_phantom(PhantomKind::GaussianMixture, &PhantomParams::default(), 2.0, [24, 24, 24], 3).unwrap();
        let set = p.gaussians.unwrap();
        let idx = build_index(&set, set.support_bounds().unwrap(), 3.0).unwrap();
        let v = rasterize_to_grid(&set, &idx, &p.volume.grid).unwrap();
        let diff = v.data.iter().zip(&p.volume.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6);
    }

    #[test]
    fn zero_amplitude_gives_identity() {
        for model in [MotionModel::Independent, MotionModel::RandomWalk] {
            let t = make_trajectory(10, MotionAmplitude::none(), model, 1).unwrap();
            assert!(t.transforms.iter().all(|x| *x == RigidTransform::identity()));
        }
    }

    #[test]
    fn rotation_bound_holds() {
        let amp = MotionAmplitude::moderate();
        let t = make_trajectory(10_000, amp, MotionModel::Independent, 2).unwrap();
        let max = amp.max_rotation_deg.to_radians();
        for x in &t.transforms {
            assert!(rotation_angle(&x.rotation) <= max + 1e-12);
            assert!(x.translation.iter().all(|v| v.abs() <= amp.max_translation_mm));
        }
    }

    #[test]
    fn random_walk_steps_are_bounded() {
        let amp = MotionAmplitude::severe();
        let t = make_trajectory(2_000, amp, MotionModel::RandomWalk, 3).unwrap();
        for w in t.transforms.windows(2) {
            let step = rotation_angle(&(w[1].rotation * w[0].rotation.inverse()));
            assert!(step <= amp.step_rotation_deg.to_radians() + 1e-12);
            assert!(so3_log(&w[1].rotation).norm() <= amp.max_rotation_deg.to_radians() + 1e-12);
        }
    }

    #[test]
    fn orientations_are_orthogonal() {
        let n: Vec<Vector3<f64>> = orthogonal_orientations().iter().map(|q| q * Vector3::z()).collect();
        for i in 0..3 {
            for j in i + 1..3 {
                assert!(n[i].dot(&n[j]).abs() < 1e-12);
            }
        }
    }
}
