//! Reconstruction hyperparameters and learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::adam::AdamConfig;
use crate::acquisition::PsfSpec;
use crate::error::{Error, Result};
use crate::objective::LossConfig;

/// Per-stage replacements for the constant learning rates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrOverrides {
    pub rotation: Option<f64>,
    pub log_scale: Option<f64>,
    pub intensity: Option<f64>,
    pub motion_rotation: Option<f64>,
    pub motion_translation: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub name: String,
    /// In-plane downsampling of the slices (1 = acquired resolution).
    pub resolution_factor: usize,
    pub iterations: usize,
    /// Number of primitives at the start of the stage.
    pub budget: usize,
    #[serde(default)]
    pub lr: LrOverrides,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    /// Center rate at the first iteration of the first stage.
    pub center_start: f64,
    /// Center rate at the last iteration of the last stage.
    pub center_end: f64,
    pub rotation: f64,
    pub log_scale: f64,
    pub intensity: f64,
    /// Axis-angle rate of the slice transforms.
    pub motion_rotation: f64,
    pub motion_translation: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            center_start: 2e-3,
            center_end: 2e-6,
            rotation: 0.001,
            log_scale: 0.005,
            intensity: 0.05,
            motion_rotation: 5e-5,
            motion_translation: 5e-4,
        }
    }
}

/// The six optimized parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Center,
    Rotation,
    LogScale,
    Intensity,
    MotionRotation,
    MotionTranslation,
}

/// How slice transforms are initialized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum TransformInit {
    /// Whatever the stacks carry (nominal geometry for freshly acquired data).
    #[default]
    Nominal,
    /// Ground truth perturbed by seeded noise of the given amplitude.
    OraclePerturbed { rotation_deg: f64, translation_mm: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    /// Initial isotropic scale as a multiple of the lattice spacing.
    pub scale_factor: f64,
    /// Divide seeded intensities by the lattice's Gaussian density so the
    /// initial field reproduces the seeded values instead of overshooting them.
    pub density_correction: bool,
    pub transforms: TransformInit,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            scale_factor: 0.75,
            density_correction: true,
            transforms: TransformInit::Nominal,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconConfig {
    pub stages: Vec<StageConfig>,
    pub lr: LearningRates,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub psf: PsfSpec,
    pub init: InitConfig,
    /// Voxel spacing of the TV grid at full resolution, mm.
    pub volume_spacing: f64,
    /// Slices per iteration (0 = all slices every iteration).
    pub slices_per_iter: usize,
    /// Bounds on every primitive scale, mm.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Iterations between in-memory checkpoints used by the divergence guard.
    pub checkpoint_every: usize,
    /// Learning-rate halvings allowed per stage before giving up.
    pub max_restarts: usize,
    /// Stop a stage early once the relative drop of the windowed mean loss
    /// falls below this value (0 disables).
    pub convergence_tol: f64,
    pub convergence_window: usize,
    pub seed: u64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl ReconConfig {
    /// Clinical-scale settings: 2000 coarse + 4000 fine iterations, 20k/80k
    /// primitives, the published learning rates.
    pub fn paper() -> Self {
        Self {
            stages: vec![
                StageConfig {
                    name: "coarse".into(),
                    resolution_factor: 2,
                    iterations: 2000,
                    budget: 20_000,
                    lr: LrOverrides::default(),
                },
                StageConfig {
                    name: "fine".into(),
                    resolution_factor: 1,
                    iterations: 4000,
                    budget: 80_000,
                    lr: LrOverrides::default(),
                },
            ],
            lr: LearningRates::default(),
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            psf: PsfSpec::default(),
            init: InitConfig::default(),
            volume_spacing: 0.8,
            slices_per_iter: 0,
            scale_min: 0.05,
            scale_max: 50.0,
            checkpoint_every: 50,
            max_restarts: 3,
            convergence_tol: 0.0,
            convergence_window: 100,
            seed: 0,
        }
    }

    /// Settings sized for the 64³ desk benchmark on a single CPU core.
    pub fn desk() -> Self {
        Self {
            stages: vec![
                StageConfig {
                    name: "coarse".into(),
                    resolution_factor: 2,
                    iterations: 400,
                    budget: 1000,
                    lr: LrOverrides::default(),
                },
                StageConfig {
                    name: "fine".into(),
                    resolution_factor: 1,
                    iterations: 150,
                    budget: 3000,
                    lr: LrOverrides {
                        motion_rotation: Some(5e-4),
                        motion_translation: Some(0.0125),
                        ..LrOverrides::default()
                    },
                },
            ],
            lr: LearningRates {
                center_start: 0.1,
                center_end: 0.005,
                rotation: 0.01,
                log_scale: 0.01,
                intensity: 0.01,
                motion_rotation: 2e-3,
                motion_translation: 0.05,
            },
            loss: LossConfig {
                tv_crop: [16, 16, 16],
                ..LossConfig::default()
            },
            psf: PsfSpec {
                samples_per_axis: [1, 1, 3],
                ..PsfSpec::default()
            },
            volume_spacing: 1.6,
            slices_per_iter: 12,
            ..Self::paper()
        }
    }

    pub fn total_iterations(&self) -> usize {
        self.stages.iter().map(|s| s.iterations).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::validation("stages", "at least one stage is required"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.resolution_factor < 1 {
                return Err(Error::validation(format!("stages[{i}].resolution_factor"), "must be >= 1"));
            }
            if s.budget < 8 {
                return Err(Error::validation(format!("stages[{i}].budget"), format!("must be >= 8, got {}", s.budget)));
            }
            if i > 0 {
                let prev = &self.stages[i - 1];
                if s.resolution_factor > prev.resolution_factor {
                    return Err(Error::validation(format!("stages[{i}].resolution_factor"), "stages must run coarse to fine"));
                }
                if s.budget < prev.budget {
                    return Err(Error::validation(format!("stages[{i}].budget"), "budgets may not shrink between stages"));
                }
            }
            let o = &s.lr;
            for (name, v) in [
                ("rotation", o.rotation),
                ("log_scale", o.log_scale),
                ("intensity", o.intensity),
                ("motion_rotation", o.motion_rotation),
                ("motion_translation", o.motion_translation),
            ] {
                if let Some(v) = v {
                    if !(v.is_finite() && v >= 0.0) {
                        return Err(Error::validation(format!("stages[{i}].lr.{name}"), format!("must be finite and >= 0, got {v}")));
                    }
                }
            }
        }
        let lr = &self.lr;
        for (name, v) in [
            ("lr.center_start", lr.center_start),
            ("lr.center_end", lr.center_end),
            ("lr.rotation", lr.rotation),
            ("lr.log_scale", lr.log_scale),
            ("lr.intensity", lr.intensity),
            ("lr.motion_rotation", lr.motion_rotation),
            ("lr.motion_translation", lr.motion_translation),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        if (lr.center_start == 0.0) != (lr.center_end == 0.0) {
            return Err(Error::validation("lr.center_end", "center rates must both be zero or both positive"));
        }
        self.adam.validate()?;
        self.loss.validate()?;
        self.psf.validate("psf")?;
        if !(self.init.scale_factor.is_finite() && self.init.scale_factor > 0.0) {
            return Err(Error::validation("init.scale_factor", "must be > 0"));
        }
        if let TransformInit::OraclePerturbed { rotation_deg, translation_mm } = self.init.transforms {
            if !(rotation_deg.is_finite() && (0.0..180.0).contains(&rotation_deg)) {
                return Err(Error::validation("init.transforms.rotation_deg", "must be in [0, 180)"));
            }
            if !(translation_mm.is_finite() && translation_mm >= 0.0) {
                return Err(Error::validation("init.transforms.translation_mm", "must be >= 0"));
            }
        }
        if !(self.volume_spacing.is_finite() && self.volume_spacing > 0.0) {
            return Err(Error::validation("volume_spacing", "must be > 0"));
        }
        if !(self.scale_min.is_finite() && self.scale_min > 0.0 && self.scale_max.is_finite() && self.scale_max > self.scale_min) {
            return Err(Error::validation("scale_max", "need 0 < scale_min < scale_max"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::validation("checkpoint_every", "must be >= 1"));
        }
        if !(self.convergence_tol.is_finite() && self.convergence_tol >= 0.0) {
            return Err(Error::validation("convergence_tol", "must be >= 0"));
        }
        if self.convergence_window == 0 {
            return Err(Error::validation("convergence_window", "must be >= 1"));
        }
        Ok(())
    }

    /// Learning rate of `group` at iteration `iter` of stage `stage`. Center
    /// rates decay exponentially over all stages combined.
    pub fn lr_schedule(&self, group: ParamGroup, stage: usize, iter: usize) -> f64 {
        let o = self.stages.get(stage).map(|s| s.lr).unwrap_or_default();
        match group {
            ParamGroup::Center => {
                let total = self.total_iterations();
                let global = self.stages.iter().take(stage).map(|s| s.iterations).sum::<usize>() + iter;
                let (a, b) = (self.lr.center_start, self.lr.center_end);
                if a == 0.0 || total <= 1 {
                    return a;
                }
                let frac = (global as f64 / (total - 1) as f64).min(1.0);
                a * (b / a).powf(frac)
            }
            ParamGroup::Rotation => o.rotation.unwrap_or(self.lr.rotation),
            ParamGroup::LogScale => o.log_scale.unwrap_or(self.lr.log_scale),
            ParamGroup::Intensity => o.intensity.unwrap_or(self.lr.intensity),
            ParamGroup::MotionRotation => o.motion_rotation.unwrap_or(self.lr.motion_rotation),
            ParamGroup::MotionTranslation => o.motion_translation.unwrap_or(self.lr.motion_translation),
        }
    }

    /// The "w/o transformation optimization" arm: slice transforms stay fixed.
    pub fn without_motion(&self) -> Self {
        let mut c = self.clone();
        c.lr.motion_rotation = 0.0;
        c.lr.motion_translation = 0.0;
        for s in &mut c.stages {
            s.lr.motion_rotation = None;
            s.lr.motion_translation = None;
        }
        c
    }

    /// The "w/o low resolution" arm: a single full-resolution stage with the
    /// combined iteration count and the final budget.
    pub fn single_resolution(&self) -> Self {
        let mut c = self.clone();
        let last = self.stages.last().cloned();
        if let Some(mut s) = last {
            s.resolution_factor = 1;
            s.iterations = self.total_iterations();
            c.stages = vec![s];
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_rate_decays_across_stages() {
        let c = ReconConfig::paper();
        assert_eq!(c.lr_schedule(ParamGroup::Center, 0, 0), 2e-3);
        let last = c.lr_schedule(ParamGroup::Center, 1, 3999);
        assert!((last - 2e-6).abs() < 1e-18);
        let mid = c.lr_schedule(ParamGroup::Center, 1, 0);
        assert!(mid < 2e-3 && mid > 2e-6);
    }

    #[test]
    fn constant_groups() {
        let c = ReconConfig::paper();
        for (stage, iter) in [(0, 0), (0, 1999), (1, 17)] {
            assert_eq!(c.lr_schedule(ParamGroup::Intensity, stage, iter), 0.05);
            assert_eq!(c.lr_schedule(ParamGroup::LogScale, stage, iter), 0.005);
            assert_eq!(c.lr_schedule(ParamGroup::Rotation, stage, iter), 0.001);
            assert_eq!(c.lr_schedule(ParamGroup::MotionTranslation, stage, iter), 5e-4);
            assert_eq!(c.lr_schedule(ParamGroup::MotionRotation, stage, iter), 5e-5);
        }
    }

    #[test]
    fn presets_validate() {
        ReconConfig::paper().validate().unwrap();
        ReconConfig::desk().validate().unwrap();
        ReconConfig::desk().without_motion().validate().unwrap();
        ReconConfig::desk().single_resolution().validate().unwrap();
    }

    #[test]
    fn rejects_zero_resolution_factor() {
        let mut c = ReconConfig::desk();
        c.stages[0].resolution_factor = 0;
        assert!(matches!(c.validate(), Err(Error::Validation { field, .. }) if field == "stages[0].resolution_factor"));
    }

    #[test]
    fn ablations() {
        let c = ReconConfig::desk();
        let frozen = c.without_motion();
        assert_eq!(frozen.lr_schedule(ParamGroup::MotionRotation, 1, 0), 0.0);
        let single = c.single_resolution();
        assert_eq!(single.stages.len(), 1);
        assert_eq!(single.stages[0].resolution_factor, 1);
        assert_eq!(single.total_iterations(), c.total_iterations());
    }
}
