//! Binary portable graymap (P5) export of volume cross-sections.

use std::path::{Path, PathBuf};

use super::container::write_atomic;
use crate::error::Result;
use crate::volume::VoxelVolume;

/// 8-bit P5 image; `values` are row-major and mapped linearly from `[lo, hi]` to 0..=255.
pub fn encode_pgm(width: usize, height: usize, values: &[f64], lo: f64, hi: f64) -> Vec<u8> {
    assert_eq!(values.len(), width * height, "image size");
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| {
        let t = ((v - lo) / span).clamp(0.0, 1.0);
        if t.is_nan() { 0 } else { (t * 255.0).round() as u8 }
    }));
    out
}

/// Central cross-section perpendicular to `axis` (0, 1 or 2); returns (width, height, values).
pub fn cross_section(volume: &VoxelVolume, axis: usize, index: usize) -> (usize, usize, Vec<f64>) {
    let d = volume.grid.dims;
    let (u, v) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let mut values = Vec::with_capacity(d[u] * d[v]);
    // Rows run along `v` (top row = highest coordinate), columns along `u`.
    for row in (0..d[v]).rev() {
        for col in 0..d[u] {
            let mut p = [0usize; 3];
            p[axis] = index.min(d[axis] - 1);
            p[u] = col;
            p[v] = row;
            values.push(volume.at(p[0], p[1], p[2]));
        }
    }
    (d[u], d[v], values)
}

/// Write sagittal, coronal and axial central cross-sections as
/// `<prefix>_{sagittal,coronal,axial}.pgm`, sharing one intensity window.
pub fn export_cross_sections(volume: &VoxelVolume, dir: &Path, prefix: &str, window: Option<(f64, f64)>) -> Result<Vec<PathBuf>> {
    let (lo, hi) = window.unwrap_or_else(|| volume.min_max());
    let mut written = Vec::new();
    for (axis, name) in ["sagittal", "coronal", "axial"].into_iter().enumerate() {
        let (w, h, values) = cross_section(volume, axis, volume.grid.dims[axis] / 2);
        let path = dir.join(format!("{prefix}_{name}.pgm"));
        write_atomic(&path, &encode_pgm(w, h, &values, lo, hi))?;
        written.push(path);
    }
    Ok(written)
}
