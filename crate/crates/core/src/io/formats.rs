//! The binary formats: GVOL (voxel volume), GSTK (slice stacks), GGAU
//! (Gaussian primitives) and GADM (optimizer state).
//!
//! Every `decode_*` works on bytes and only fails with a typed [`FormatError`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::container::{
    check_encoding, checked_product, decode, encode, f32_payload, parse_metadata, read_f32s, read_file, write_atomic, FormatError,
};
use super::transforms::PoseRecord;
use crate::acquisition::{Slice, SliceStack, Stack, StackGeometry};
use crate::error::Result;
use crate::field::{Aabb, GaussianSet};
use crate::optimizer::{AdamBuffer, AdamState};
use crate::volume::{GridSpec, VoxelVolume};

pub const GVOL_MAGIC: &[u8; 4] = b"GVOL";
pub const GSTK_MAGIC: &[u8; 4] = b"GSTK";
pub const GGAU_MAGIC: &[u8; 4] = b"GGAU";
pub const GADM_MAGIC: &[u8; 4] = b"GADM";
pub const FORMAT_VERSION: u32 = 1;

const ENCODING: &str = "f32le";

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("metadata serializes")
}

fn positive(field: &str, v: f64) -> Result<(), FormatError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(FormatError::validation(field, format!("must be finite and > 0, got {v}")))
    }
}

// ---------------------------------------------------------------- GVOL

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeHeader {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    encoding: String,
    intensity_scale: f64,
}

pub fn encode_volume(volume: &VoxelVolume) -> Vec<u8> {
    let header = VolumeHeader {
        dims: volume.grid.dims,
        spacing: volume.grid.spacing,
        origin: volume.grid.origin,
        encoding: ENCODING.into(),
        intensity_scale: volume.intensity_scale,
    };
    encode(GVOL_MAGIC, FORMAT_VERSION, &to_json(&header), &f32_payload(volume.data.iter().copied()))
}

pub fn decode_volume(bytes: &[u8]) -> Result<VoxelVolume, FormatError> {
    let d = decode(bytes, GVOL_MAGIC, FORMAT_VERSION)?;
    let h: VolumeHeader = parse_metadata(d.metadata)?;
    check_encoding(&h.encoding)?;
    for a in 0..3 {
        positive(&format!("spacing[{a}]"), h.spacing[a])?;
        if h.dims[a] == 0 {
            return Err(FormatError::validation(format!("dims[{a}]"), "must be >= 1"));
        }
        if !h.origin[a].is_finite() {
            return Err(FormatError::validation(format!("origin[{a}]"), "must be finite"));
        }
    }
    positive("intensity_scale", h.intensity_scale)?;
    let n = checked_product(&h.dims, "dims")?;
    let data = read_f32s(d.payload, n)?;
    Ok(VoxelVolume {
        grid: GridSpec {
            origin: h.origin,
            spacing: h.spacing,
            dims: h.dims,
        },
        data,
        intensity_scale: h.intensity_scale,
    })
}

pub fn write_volume(path: &Path, volume: &VoxelVolume) -> Result<()> {
    write_atomic(path, &encode_volume(volume))
}

pub fn read_volume(path: &Path) -> Result<VoxelVolume> {
    Ok(decode_volume(&read_file(path)?)?)
}

// ---------------------------------------------------------------- GSTK

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StackHeader {
    in_plane_spacing: [f64; 2],
    rows: usize,
    cols: usize,
    slice_thickness: f64,
    slice_gap: f64,
    orientation: PoseRecord,
    n_slices: usize,
    /// Current motion estimate per slice.
    transforms: Vec<PoseRecord>,
    /// Ground-truth motion per slice, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    truth: Option<Vec<PoseRecord>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StackFileHeader {
    encoding: String,
    units: String,
    norm_scale: f64,
    stacks: Vec<StackHeader>,
    /// File name of a transform sidecar written alongside, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sidecar: Option<String>,
}

pub fn encode_stack(stacks: &SliceStack, sidecar: Option<&str>) -> Vec<u8> {
    let headers = stacks
        .stacks
        .iter()
        .map(|s| {
            let g = &s.geometry;
            let truth: Option<Vec<PoseRecord>> = s
                .slices
                .iter()
                .map(|sl| sl.truth.as_ref().map(PoseRecord::from_transform))
                .collect();
            StackHeader {
                in_plane_spacing: g.in_plane_spacing,
                rows: g.rows,
                cols: g.cols,
                slice_thickness: g.slice_thickness,
                slice_gap: g.slice_gap,
                orientation: PoseRecord::from_transform(&crate::motion::RigidTransform::new(g.orientation, g.center)),
                n_slices: g.n_slices,
                transforms: s.slices.iter().map(|sl| PoseRecord::from_transform(&sl.transform)).collect(),
                truth,
            }
        })
        .collect();
    let header = StackFileHeader {
        encoding: ENCODING.into(),
        units: "mm".into(),
        norm_scale: stacks.norm_scale,
        stacks: headers,
        sidecar: sidecar.map(str::to_string),
    };
    let payload = f32_payload(stacks.stacks.iter().flat_map(|s| s.slices.iter().flat_map(|sl| sl.pixels.iter().copied())));
    encode(GSTK_MAGIC, FORMAT_VERSION, &to_json(&header), &payload)
}

pub fn decode_stack(bytes: &[u8]) -> Result<SliceStack, FormatError> {
    let d = decode(bytes, GSTK_MAGIC, FORMAT_VERSION)?;
    let h: StackFileHeader = parse_metadata(d.metadata)?;
    check_encoding(&h.encoding)?;
    if h.units != "mm" {
        return Err(FormatError::validation("units", format!("expected \"mm\", found {:?}", h.units)));
    }
    positive("norm_scale", h.norm_scale)?;
    let mut total = 0usize;
    for (s, st) in h.stacks.iter().enumerate() {
        let px = checked_product(&[st.rows, st.cols, st.n_slices], &format!("stacks[{s}]"))?;
        total = total
            .checked_add(px)
            .filter(|&t| t <= 1 << 40)
            .ok_or_else(|| FormatError::validation("stacks", "pixel count overflows"))?;
    }
    let values = read_f32s(d.payload, total)?;

    let mut offset = 0;
    let mut stacks = Vec::with_capacity(h.stacks.len());
    for (s, st) in h.stacks.iter().enumerate() {
        let prefix = format!("stacks[{s}]");
        let pose = st.orientation.to_transform(&format!("{prefix}.orientation"))?;
        let geometry = StackGeometry {
            in_plane_spacing: st.in_plane_spacing,
            rows: st.rows,
            cols: st.cols,
            slice_thickness: st.slice_thickness,
            slice_gap: st.slice_gap,
            orientation: pose.rotation,
            center: pose.translation,
            n_slices: st.n_slices,
        };
        geometry.validate(&prefix)?;
        if st.transforms.len() != st.n_slices {
            return Err(FormatError::validation(
                format!("{prefix}.transforms"),
                format!("{} entries for {} slices", st.transforms.len(), st.n_slices),
            ));
        }
        if let Some(t) = &st.truth {
            if t.len() != st.n_slices {
                return Err(FormatError::validation(
                    format!("{prefix}.truth"),
                    format!("{} entries for {} slices", t.len(), st.n_slices),
                ));
            }
        }
        let n_px = st.rows * st.cols;
        let mut slices = Vec::with_capacity(st.n_slices);
        for k in 0..st.n_slices {
            let transform = st.transforms[k].to_transform(&format!("{prefix}.transforms[{k}]"))?;
            let truth = match &st.truth {
                Some(t) => Some(t[k].to_transform(&format!("{prefix}.truth[{k}]"))?),
                None => None,
            };
            slices.push(Slice {
                pixels: values[offset..offset + n_px].to_vec(),
                transform,
                truth,
            });
            offset += n_px;
        }
        stacks.push(Stack { geometry, slices });
    }
    let mut out = SliceStack::new(stacks);
    out.norm_scale = h.norm_scale;
    Ok(out)
}

/// The sidecar file name recorded in a GSTK header, if any.
pub fn stack_sidecar(bytes: &[u8]) -> Result<Option<String>, FormatError> {
    let d = decode(bytes, GSTK_MAGIC, FORMAT_VERSION)?;
    let h: StackFileHeader = parse_metadata(d.metadata)?;
    Ok(h.sidecar)
}

pub fn write_stack(path: &Path, stacks: &SliceStack, sidecar: Option<&str>) -> Result<()> {
    write_atomic(path, &encode_stack(stacks, sidecar))
}

pub fn read_stack(path: &Path) -> Result<SliceStack> {
    Ok(decode_stack(&read_file(path)?)?)
}

// ---------------------------------------------------------------- GGAU

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GaussianHeader {
    count: usize,
    /// Box enclosing every primitive's 3σ support; absent for an empty set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bounds: Option<Aabb>,
    units: String,
    encoding: String,
}

pub fn encode_gaussians(set: &GaussianSet) -> Vec<u8> {
    // Bounds describe the stored (single-precision) values, so they survive a round trip.
    let r = |v: f64| v as f32 as f64;
    let set = &GaussianSet {
        centers: set.centers.iter().map(|c| c.map(r)).collect(),
        rotations: set.rotations.iter().map(|q| q.map(r)).collect(),
        log_scales: set.log_scales.iter().map(|s| s.map(r)).collect(),
        intensities: set.intensities.iter().map(|&v| r(v)).collect(),
    };
    let header = GaussianHeader {
        count: set.len(),
        bounds: set.support_bounds(),
        units: "mm".into(),
        encoding: ENCODING.into(),
    };
    let values = set
        .centers
        .iter()
        .flatten()
        .chain(set.rotations.iter().flatten())
        .chain(set.log_scales.iter().flatten())
        .chain(&set.intensities)
        .copied();
    encode(GGAU_MAGIC, FORMAT_VERSION, &to_json(&header), &f32_payload(values))
}

pub fn decode_gaussians(bytes: &[u8]) -> Result<GaussianSet, FormatError> {
    let d = decode(bytes, GGAU_MAGIC, FORMAT_VERSION)?;
    let h: GaussianHeader = parse_metadata(d.metadata)?;
    check_encoding(&h.encoding)?;
    if h.units != "mm" {
        return Err(FormatError::validation("units", format!("expected \"mm\", found {:?}", h.units)));
    }
    let n = h.count;
    let v = read_f32s(d.payload, checked_product(&[n, 11], "count")?)?;
    let (c, rest) = v.split_at(3 * n);
    let (q, rest) = rest.split_at(4 * n);
    let (s, i) = rest.split_at(3 * n);
    let set = GaussianSet {
        centers: c.chunks_exact(3).map(|x| [x[0], x[1], x[2]]).collect(),
        rotations: q.chunks_exact(4).map(|x| [x[0], x[1], x[2], x[3]]).collect(),
        log_scales: s.chunks_exact(3).map(|x| [x[0], x[1], x[2]]).collect(),
        intensities: i.to_vec(),
    };
    set.validate(0.0, f64::INFINITY)?;
    Ok(set)
}

pub fn write_gaussians(path: &Path, set: &GaussianSet) -> Result<()> {
    write_atomic(path, &encode_gaussians(set))
}

pub fn read_gaussians(path: &Path) -> Result<GaussianSet> {
    Ok(decode_gaussians(&read_file(path)?)?)
}

// ---------------------------------------------------------------- GADM

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamHeader {
    n_gaussians: usize,
    n_slices: usize,
    encoding: String,
    /// Step counters: the four Gaussian groups, then per-slice rotation, then per-slice translation.
    steps: Vec<u64>,
}

fn adam_buffers(state: &AdamState) -> Vec<&AdamBuffer> {
    [&state.centers, &state.rotations, &state.log_scales, &state.intensities]
        .into_iter()
        .chain(&state.motion_rotation)
        .chain(&state.motion_translation)
        .collect()
}

/// Optimizer state in full double precision: m then v of every buffer, in header order.
pub fn encode_adam(state: &AdamState) -> Vec<u8> {
    let buffers = adam_buffers(state);
    let header = AdamHeader {
        n_gaussians: state.intensities.len(),
        n_slices: state.motion_rotation.len(),
        encoding: "f64le".into(),
        steps: buffers.iter().map(|b| b.step).collect(),
    };
    let payload: Vec<u8> = buffers
        .iter()
        .flat_map(|b| b.m.iter().chain(&b.v))
        .flat_map(|v| v.to_le_bytes())
        .collect();
    encode(GADM_MAGIC, FORMAT_VERSION, &to_json(&header), &payload)
}

pub fn decode_adam(bytes: &[u8]) -> Result<AdamState, FormatError> {
    let d = decode(bytes, GADM_MAGIC, FORMAT_VERSION)?;
    let h: AdamHeader = parse_metadata(d.metadata)?;
    if h.encoding != "f64le" {
        return Err(FormatError::UnsupportedEncoding(h.encoding));
    }
    let lens: Vec<usize> = [3 * h.n_gaussians, 4 * h.n_gaussians, 3 * h.n_gaussians, h.n_gaussians]
        .into_iter()
        .chain(std::iter::repeat_n(3, 2 * h.n_slices))
        .collect();
    if h.steps.len() != lens.len() {
        return Err(FormatError::validation("steps", format!("{} counters for {} buffers", h.steps.len(), lens.len())));
    }
    let total = lens
        .iter()
        .try_fold(0u64, |acc, &l| acc.checked_add(2 * l as u64))
        .ok_or_else(|| FormatError::validation("n_gaussians", "size overflows"))?;
    let expected = total.checked_mul(8).ok_or_else(|| FormatError::validation("n_gaussians", "size overflows"))?;
    if d.payload.len() as u64 != expected {
        return Err(FormatError::SizeMismatch {
            expected,
            found: d.payload.len() as u64,
        });
    }
    let mut values = d.payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut buffers: Vec<AdamBuffer> = lens
        .iter()
        .zip(&h.steps)
        .map(|(&l, &step)| AdamBuffer {
            m: values.by_ref().take(l).collect(),
            v: values.by_ref().take(l).collect(),
            step,
        })
        .collect();
    let motion_translation = buffers.split_off(4 + h.n_slices);
    let motion_rotation = buffers.split_off(4);
    let mut it = buffers.into_iter();
    let mut next = || it.next().expect("four gaussian buffers");
    Ok(AdamState {
        centers: next(),
        rotations: next(),
        log_scales: next(),
        intensities: next(),
        motion_rotation,
        motion_translation,
    })
}

pub fn write_adam(path: &Path, state: &AdamState) -> Result<()> {
    write_atomic(path, &encode_adam(state))
}

pub fn read_adam(path: &Path) -> Result<AdamState> {
    Ok(decode_adam(&read_file(path)?)?)
}
