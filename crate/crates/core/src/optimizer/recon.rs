//! The joint optimization loop over Gaussian and slice-motion parameters.

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::AdamState;
use super::config::{ParamGroup, ReconConfig, TransformInit};
use super::init::{apply_density_correction, init_gaussians, lattice_spacing, stage_transition};
use crate::acquisition::{backward_slices, build_psf_with, forward_slices, PsfModel, SliceJob, SliceStack};
use crate::error::{Error, Result};
use crate::field::{default_cell_size, Aabb, Field, GaussianGrads, GaussianSet, SpatialIndex};
use crate::motion::{exp_update, so3_exp, MotionParams, RigidTransform, SliceGeometry};
use crate::objective::{total_loss, LossReport, SlicePair};
use crate::volume::GridSpec;

/// Learning rates in effect at one iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LrSnapshot {
    pub center: f64,
    pub rotation: f64,
    pub log_scale: f64,
    pub intensity: f64,
    pub motion_rotation: f64,
    pub motion_translation: f64,
}

/// One line of the loss trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    /// Iteration counted over all stages.
    pub iteration: usize,
    pub stage: usize,
    pub stage_iteration: usize,
    pub total: f64,
    pub l1: f64,
    pub dssim: f64,
    pub tv: f64,
    pub n_gaussians: usize,
    pub lr: LrSnapshot,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub event: Option<String>,
}

/// Optional starting point overriding the configured initialization.
#[derive(Clone, Debug, Default)]
pub struct InitialState {
    /// Primitives in acquired intensity units.
    pub gaussians: Option<GaussianSet>,
    pub transforms: Option<Vec<RigidTransform>>,
}

#[derive(Clone, Debug)]
pub struct ReconOutput {
    /// Final primitives in acquired intensity units.
    pub gaussians: GaussianSet,
    /// Primitives right after initialization, in acquired intensity units.
    pub initial_gaussians: GaussianSet,
    pub transforms: Vec<RigidTransform>,
    pub log: Vec<LogEntry>,
    /// Factor the slices were divided by before optimization.
    pub norm_scale: f64,
    /// Full-resolution loss of the initialization and of the result.
    pub initial_loss: LossReport,
    pub final_loss: LossReport,
    /// Optimizer moments at the end of the last stage.
    pub adam: AdamState,
}

/// Reconstruct from `stacks` with the configured initialization.
pub fn reconstruct(stacks: &SliceStack, cfg: &ReconConfig) -> Result<ReconOutput> {
    reconstruct_with(stacks, cfg, InitialState::default())
}

/// Fixed data of one stage: slices at the stage resolution and their PSFs.
struct Problem {
    stacks: SliceStack,
    geoms: Vec<SliceGeometry>,
    stack_of: Vec<usize>,
    psfs: Vec<PsfModel>,
    grid: GridSpec,
    bounds: Aabb,
}

impl Problem {
    fn new(stacks: SliceStack, cfg: &ReconConfig, factor: usize) -> Result<Self> {
        let psfs = stacks
            .stacks
            .iter()
            .map(|s| build_psf_with(&s.geometry.slice(0), &cfg.psf))
            .collect::<Result<Vec<_>>>()?;
        let geoms = stacks.slices().map(|s| s.geometry).collect();
        let stack_of = stacks.slices().map(|s| s.stack).collect();
        let bounds = stacks
            .union_bounds()
            .filter(Aabb::is_finite)
            .ok_or_else(|| Error::validation("stacks", "slice footprint is not finite"))?;
        let grid = GridSpec::covering(&bounds, cfg.volume_spacing * factor as f64);
        grid.validate()?;
        Ok(Self {
            stacks,
            geoms,
            stack_of,
            psfs,
            grid,
            bounds,
        })
    }

    fn pixels(&self, i: usize) -> &[f64] {
        let mut k = i;
        for st in &self.stacks.stacks {
            if k < st.slices.len() {
                return &st.slices[k].pixels;
            }
            k -= st.slices.len();
        }
        unreachable!("slice index {i} out of range")
    }

    fn n_slices(&self) -> usize {
        self.geoms.len()
    }
}

/// Everything the divergence guard needs to roll back.
#[derive(Clone)]
struct Checkpoint {
    set: GaussianSet,
    base: Vec<RigidTransform>,
    params: Vec<MotionParams>,
    adam: AdamState,
    rng: ChaCha8Rng,
    iter: usize,
    log_len: usize,
}

struct Evaluation {
    report: LossReport,
    grads: Option<(GaussianGrads, Vec<[f64; 6]>)>,
}

/// Loss (and optionally gradients) over the slices in `batch`, plus TV over `crop`.
#[allow(clippy::too_many_arguments)]
fn evaluate(
    problem: &Problem,
    set: &GaussianSet,
    index: &SpatialIndex,
    transforms: &[RigidTransform],
    params: &[MotionParams],
    batch: &[usize],
    crop: Option<&GridSpec>,
    cfg: &ReconConfig,
    with_grads: bool,
) -> Result<Evaluation> {
    let field = Field::new(set, index);
    let jobs: Vec<SliceJob> = batch
        .iter()
        .map(|&i| SliceJob {
            geometry: problem.geoms[i],
            transform: transforms[i],
            psf: &problem.psfs[problem.stack_of[i]],
        })
        .collect();
    let rendered = forward_slices(&field, &jobs);
    let pairs: Vec<SlicePair> = batch
        .iter()
        .zip(&rendered)
        .map(|(&i, r)| SlicePair {
            acquired: problem.pixels(i),
            rendered: r,
            rows: problem.geoms[i].rows,
            cols: problem.geoms[i].cols,
        })
        .collect();
    let crop_points = crop.map(|g| g.points());
    let crop_values = crop_points.as_ref().map(|p| field.eval(p));
    let volume = crop.zip(crop_values.as_deref()).map(|(g, v)| (v, g.dims));
    let (report, loss_grads) = total_loss(&pairs, volume, &cfg.loss)?;
    if !with_grads || !report.total.is_finite() {
        return Ok(Evaluation { report, grads: None });
    }
    let increments: Vec<MotionParams> = batch.iter().map(|&i| params[i]).collect();
    let (mut g, motion) = backward_slices(&field, &jobs, &increments, &loss_grads.slices)?;
    if let Some(points) = &crop_points {
        if cfg.loss.lambda2 > 0.0 {
            let (gt, _) = field.backward(points, &loss_grads.volume);
            g.add_assign(&gt);
        }
    }
    Ok(Evaluation {
        report,
        grads: Some((g, motion)),
    })
}

fn random_crop(grid: &GridSpec, size: [usize; 3], rng: &mut ChaCha8Rng) -> GridSpec {
    let dims: [usize; 3] = std::array::from_fn(|a| size[a].min(grid.dims[a]));
    let start: [usize; 3] = std::array::from_fn(|a| rng.gen_range(0..=grid.dims[a] - dims[a]));
    grid.crop(start, dims)
}

fn lr_snapshot(cfg: &ReconConfig, stage: usize, iter: usize, mult: f64) -> LrSnapshot {
    let lr = |g| mult * cfg.lr_schedule(g, stage, iter);
    LrSnapshot {
        center: lr(ParamGroup::Center),
        rotation: lr(ParamGroup::Rotation),
        log_scale: lr(ParamGroup::LogScale),
        intensity: lr(ParamGroup::Intensity),
        motion_rotation: lr(ParamGroup::MotionRotation),
        motion_translation: lr(ParamGroup::MotionTranslation),
    }
}

fn index_for(set: &GaussianSet, bounds: &Aabb) -> Result<SpatialIndex> {
    let cell = 0.5 * default_cell_size(set);
    SpatialIndex::build(set, *bounds, cell, 0.25 * cell)
}

fn current_transforms(base: &[RigidTransform], params: &[MotionParams]) -> Result<Vec<RigidTransform>> {
    base.iter().zip(params).map(|(b, p)| exp_update(b, p)).collect()
}

fn scale_intensities(set: &GaussianSet, factor: f64) -> GaussianSet {
    let mut out = set.clone();
    out.intensities.iter_mut().for_each(|v| *v *= factor);
    out
}

fn params_finite(set: &GaussianSet, params: &[MotionParams]) -> bool {
    set.centers.iter().flatten().all(|v| v.is_finite())
        && set.rotations.iter().flatten().all(|v| v.is_finite())
        && set.log_scales.iter().flatten().all(|v| v.is_finite())
        && set.intensities.iter().all(|v| v.is_finite())
        && params.iter().all(|p| p.axis_angle.iter().chain(p.translation.iter()).all(|v| v.is_finite()))
}

/// Initial transforms per the config: nominal/as-given, or ground truth
/// perturbed by seeded noise bounded by the requested amplitude.
fn initial_transforms(stacks: &SliceStack, cfg: &ReconConfig, given: Option<&[RigidTransform]>) -> Result<Vec<RigidTransform>> {
    if let Some(t) = given {
        if t.len() != stacks.n_slices() {
            return Err(Error::Shape(format!("{} initial transforms for {} slices", t.len(), stacks.n_slices())));
        }
        return Ok(t.to_vec());
    }
    match cfg.init.transforms {
        TransformInit::Nominal => Ok(stacks.transforms()),
        TransformInit::OraclePerturbed { rotation_deg, translation_mm } => {
            let truths = stacks
                .truths()
                .ok_or_else(|| Error::validation("init.transforms", "oracle-perturbed initialization needs ground-truth transforms"))?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5ee_d0f0_ac1e);
            let max_rot = rotation_deg.to_radians();
            Ok(truths
                .iter()
                .map(|t| {
                    let aa = loop {
                        let v = Vector3::from_fn(|_, _| rng.gen_range(-1.0..=1.0));
                        if v.norm() <= 1.0 {
                            break v * max_rot;
                        }
                    };
                    let dt = Vector3::from_fn(|_, _| rng.gen_range(-1.0..=1.0) * translation_mm);
                    RigidTransform::new(so3_exp(&aa) * t.rotation, t.translation + dt)
                })
                .collect())
        }
    }
}

/// Reconstruct, optionally starting from given primitives and/or transforms.
pub fn reconstruct_with(stacks: &SliceStack, cfg: &ReconConfig, init: InitialState) -> Result<ReconOutput> {
    cfg.validate()?;
    stacks.validate()?;
    let mut data = stacks.clone();
    let norm = data.normalize();
    let n_slices = data.n_slices();
    let transforms0 = initial_transforms(&data, cfg, init.transforms.as_deref())?;
    data.set_transforms(&transforms0)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log: Vec<LogEntry> = Vec::new();
    let mut base = transforms0;
    let mut params = vec![MotionParams::zero(); n_slices];
    let mut set = GaussianSet::new();
    let mut initial_set = GaussianSet::new();
    let mut global_iter = 0usize;
    let mut final_adam = AdamState::new(0, n_slices);

    for (si, stage) in cfg.stages.iter().enumerate() {
        // Re-center: fold the increments into the base transforms.
        base = current_transforms(&base, &params)?;
        params = vec![MotionParams::zero(); n_slices];
        data.set_transforms(&base)?;
        let problem = Problem::new(data.downsample(stage.resolution_factor), cfg, stage.resolution_factor)?;

        set = if si == 0 {
            let s = match &init.gaussians {
                Some(g) => scale_intensities(g, 1.0 / norm),
                None => {
                    let mut s = init_gaussians(&problem.stacks, stage.budget, cfg.init.scale_factor)?;
                    if cfg.init.density_correction {
                        let h = lattice_spacing(&problem.stacks, stage.budget).unwrap_or(1.0);
                        apply_density_correction(&mut s, h);
                    }
                    s
                }
            };
            initial_set = s.clone();
            s
        } else {
            stage_transition(&set, &problem.stacks, &problem.psfs, stage.budget)?
        };
        set.validate(0.0, f64::INFINITY)?;

        let mut adam = AdamState::new(set.len(), n_slices);
        let mut index = index_for(&set, &problem.bounds)?;
        let mut lr_mult = 1.0;
        let mut restarts = 0usize;
        let mut checkpoint = Checkpoint {
            set: set.clone(),
            base: base.clone(),
            params: params.clone(),
            adam: adam.clone(),
            rng: rng.clone(),
            iter: 0,
            log_len: log.len(),
        };
        let stage_start = global_iter;
        let mut it = 0usize;
        let mut window_losses: Vec<f64> = Vec::new();

        while it < stage.iterations {
            let batch: Vec<usize> = if cfg.slices_per_iter == 0 || cfg.slices_per_iter >= n_slices {
                (0..n_slices).collect()
            } else {
                let mut b = sample(&mut rng, n_slices, cfg.slices_per_iter).into_vec();
                b.sort_unstable();
                b
            };
            let crop = if cfg.loss.lambda2 > 0.0 {
                Some(if cfg.loss.tv_full_grid {
                    problem.grid
                } else {
                    random_crop(&problem.grid, cfg.loss.tv_crop, &mut rng)
                })
            } else {
                None
            };
            if index.is_stale(&set) {
                index = index_for(&set, &problem.bounds)?;
            }
            let lrs = lr_snapshot(cfg, si, it, lr_mult);
            let step = current_transforms(&base, &params).and_then(|transforms| {
                let ev = evaluate(&problem, &set, &index, &transforms, &params, &batch, crop.as_ref(), cfg, true)?;
                Ok(ev)
            });
            let ev = match step {
                Ok(ev) if ev.report.total.is_finite() => ev,
                _ => {
                    restarts += 1;
                    if restarts > cfg.max_restarts {
                        return Err(Error::Diverged {
                            stage: si,
                            iteration: stage_start + it,
                        });
                    }
                    log.truncate(checkpoint.log_len);
                    set = checkpoint.set.clone();
                    base = checkpoint.base.clone();
                    params = checkpoint.params.clone();
                    adam = checkpoint.adam.clone();
                    rng = checkpoint.rng.clone();
                    it = checkpoint.iter;
                    lr_mult *= 0.5;
                    index = index_for(&set, &problem.bounds)?;
                    if let Some(last) = log.last_mut() {
                        last.event = Some(format!("restart {restarts}: learning rates x{lr_mult}"));
                    }
                    window_losses.truncate(it);
                    continue;
                }
            };
            let (g, motion) = ev.grads.expect("gradients requested");

            log.push(LogEntry {
                iteration: stage_start + it,
                stage: si,
                stage_iteration: it,
                total: ev.report.total,
                l1: ev.report.l1,
                dssim: ev.report.dssim,
                tv: ev.report.tv,
                n_gaussians: set.len(),
                lr: lrs,
                event: (it == 0).then(|| format!("stage {} ({}) start", si, stage.name)),
            });
            window_losses.push(ev.report.total);

            adam.centers.step(set.centers.as_flattened_mut(), g.centers.as_flattened(), lrs.center, &cfg.adam)?;
            adam.rotations.step(set.rotations.as_flattened_mut(), g.rotations.as_flattened(), lrs.rotation, &cfg.adam)?;
            adam.log_scales.step(set.log_scales.as_flattened_mut(), g.log_scales.as_flattened(), lrs.log_scale, &cfg.adam)?;
            adam.intensities.step(&mut set.intensities, &g.intensities, lrs.intensity, &cfg.adam)?;
            set.normalize_rotations();
            set.clamp_scales(cfg.scale_min, cfg.scale_max);

            if lrs.motion_rotation > 0.0 || lrs.motion_translation > 0.0 {
                for (k, &i) in batch.iter().enumerate() {
                    let mut aa: [f64; 3] = params[i].axis_angle.into();
                    let mut tr: [f64; 3] = params[i].translation.into();
                    adam.motion_rotation[i].step(&mut aa, &motion[k][..3], lrs.motion_rotation, &cfg.adam)?;
                    adam.motion_translation[i].step(&mut tr, &motion[k][3..], lrs.motion_translation, &cfg.adam)?;
                    params[i] = MotionParams {
                        axis_angle: aa.into(),
                        translation: tr.into(),
                    };
                    // Keep increments small so the exponential chart stays well conditioned.
                    if params[i].axis_angle.norm() > 1.0 {
                        if let Ok(t) = exp_update(&base[i], &params[i]) {
                            base[i] = t;
                            params[i] = MotionParams::zero();
                        }
                    }
                }
            }
            it += 1;

            if params_finite(&set, &params) && it.is_multiple_of(cfg.checkpoint_every) {
                checkpoint = Checkpoint {
                    set: set.clone(),
                    base: base.clone(),
                    params: params.clone(),
                    adam: adam.clone(),
                    rng: rng.clone(),
                    iter: it,
                    log_len: log.len(),
                };
            }

            let w = cfg.convergence_window;
            if cfg.convergence_tol > 0.0 && window_losses.len() >= 2 * w {
                let n = window_losses.len();
                let cur: f64 = window_losses[n - w..].iter().sum::<f64>() / w as f64;
                let prev: f64 = window_losses[n - 2 * w..n - w].iter().sum::<f64>() / w as f64;
                if prev > 0.0 && (prev - cur) / prev < cfg.convergence_tol {
                    if let Some(last) = log.last_mut() {
                        last.event = Some("converged".into());
                    }
                    break;
                }
            }
        }
        global_iter = stage_start + stage.iterations;
        final_adam = adam;
    }

    let transforms = current_transforms(&base, &params)?;
    let initial_loss = full_loss(&data, &initial_set, &data.transforms(), cfg)?;
    let final_loss = full_loss(&data, &set, &transforms, cfg)?;
    Ok(ReconOutput {
        gaussians: scale_intensities(&set, norm),
        initial_gaussians: scale_intensities(&initial_set, norm),
        transforms,
        log,
        norm_scale: norm,
        initial_loss,
        final_loss,
        adam: final_adam,
    })
}

/// Loss of `set` under `transforms` over every slice at acquired resolution,
/// with TV over the full grid. `stacks` must already be normalized.
fn full_loss(stacks: &SliceStack, set: &GaussianSet, transforms: &[RigidTransform], cfg: &ReconConfig) -> Result<LossReport> {
    let mut data = stacks.clone();
    data.set_transforms(transforms)?;
    let problem = Problem::new(data, cfg, 1)?;
    let index = index_for(set, &problem.bounds)?;
    let all: Vec<usize> = (0..problem.n_slices()).collect();
    let zero = vec![MotionParams::zero(); problem.n_slices()];
    let crop = (cfg.loss.lambda2 > 0.0).then_some(problem.grid);
    Ok(evaluate(&problem, set, &index, transforms, &zero, &all, crop.as_ref(), cfg, false)?.report)
}

/// Full-resolution loss of a reconstruction against acquired stacks (in
/// acquired intensity units), as reported at the end of [`reconstruct`].
pub fn evaluate_loss(stacks: &SliceStack, set: &GaussianSet, transforms: &[RigidTransform], cfg: &ReconConfig) -> Result<LossReport> {
    cfg.validate()?;
    let mut data = stacks.clone();
    let norm = data.normalize();
    full_loss(&data, &scale_intensities(set, 1.0 / norm), transforms, cfg)
}

/// Total loss over every slice of `stacks` (pixels as given, no normalization)
/// with slice `i` at `exp(increments[i]) · base[i]`, TV over `tv_grid`, and
/// its analytic gradients with respect to the primitives and the increments.
pub fn loss_and_gradients(
    stacks: &SliceStack,
    set: &GaussianSet,
    base: &[RigidTransform],
    increments: &[MotionParams],
    cfg: &ReconConfig,
    tv_grid: Option<&GridSpec>,
) -> Result<(LossReport, GaussianGrads, Vec<[f64; 6]>)> {
    cfg.validate()?;
    let problem = Problem::new(stacks.clone(), cfg, 1)?;
    if base.len() != problem.n_slices() || increments.len() != problem.n_slices() {
        return Err(Error::Shape(format!(
            "{} base transforms and {} increments for {} slices",
            base.len(),
            increments.len(),
            problem.n_slices()
        )));
    }
    let transforms = current_transforms(base, increments)?;
    let bounds = tv_grid.map_or(problem.bounds, |g| problem.bounds.union(&g.bounds()));
    let index = index_for(set, &bounds)?;
    let all: Vec<usize> = (0..problem.n_slices()).collect();
    let e = evaluate(&problem, set, &index, &transforms, increments, &all, tv_grid, cfg, true)?;
    let (g, motion) = e.grads.ok_or(Error::Diverged { stage: 0, iteration: 0 })?;
    Ok((e.report, g, motion))
}
