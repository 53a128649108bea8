//! Slice-to-volume reconstruction with anisotropic Gaussian primitives.

pub mod acquisition;
pub mod error;
pub mod field;
pub mod io;
pub mod metrics;
pub mod motion;
pub mod objective;
pub mod optimizer;
pub mod phantom;
pub mod volume;

pub use error::{Error, Result};
