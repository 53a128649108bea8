//! Adam, learning-rate schedule, initialization and the two-stage reconstruction loop.

mod adam;
mod config;
mod init;
mod recon;

pub use adam::{AdamBuffer, AdamConfig, AdamState};
pub use config::{InitConfig, LearningRates, LrOverrides, ParamGroup, ReconConfig, StageConfig, TransformInit};
pub use init::{apply_density_correction, init_gaussians, lattice_dims, lattice_spacing, stage_transition};
pub use recon::{evaluate_loss, loss_and_gradients, reconstruct, reconstruct_with, InitialState, LogEntry, LrSnapshot, ReconOutput};
