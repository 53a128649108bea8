//! Slice acquisition model: PSF, stack containers, forward rendering and simulation.

mod forward;
mod psf;
mod stack;

pub use forward::{
    backward_slices, forward_slice, forward_slice_backward, forward_slices, simulate_stack, slice_sample_points, NoiseModel,
    SliceJob, VolumeSource,
};
pub use psf::{build_psf, build_psf_with, fwhm_to_sigma, PsfModel, PsfSpec};
pub use stack::{Slice, SliceRef, SliceStack, Stack, StackGeometry};
