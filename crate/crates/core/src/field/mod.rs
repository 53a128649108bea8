//! Gaussian-primitive volume representation.

mod eval;
mod index;
mod set;

pub use eval::{eval_primitive, eval_volume, eval_volume_backward, rasterize_to_grid, render_volume, Field};
pub use index::{build_index, default_cell_size, SpatialIndex};
pub use set::{Aabb, Gaussian, GaussianGrads, GaussianSet};
