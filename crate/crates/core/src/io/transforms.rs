//! Transform sidecar: a JSON list of per-slice rigid transforms.

use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::container::{read_file, write_atomic, FormatError};
use crate::acquisition::SliceStack;
use crate::error::Result;
use crate::motion::RigidTransform;

pub const SIDECAR_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    /// Unit quaternion (w, x, y, z).
    pub quaternion: [f64; 4],
    /// Translation in mm.
    pub translation: [f64; 3],
}

impl PoseRecord {
    pub fn from_transform(t: &RigidTransform) -> Self {
        Self {
            quaternion: t.wxyz(),
            translation: t.translation.into(),
        }
    }

    /// Rebuild the transform without renormalizing, so values survive a round trip bit-exactly.
    pub fn to_transform(&self, field: &str) -> Result<RigidTransform, FormatError> {
        let [w, x, y, z] = self.quaternion;
        if !self.quaternion.iter().chain(&self.translation).all(|v| v.is_finite()) {
            return Err(FormatError::validation(field, "non-finite component"));
        }
        let norm = (w * w + x * x + y * y + z * z).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(FormatError::validation(format!("{field}.quaternion"), format!("norm {norm} is not unit")));
        }
        Ok(RigidTransform::new(
            UnitQuaternion::new_unchecked(Quaternion::new(w, x, y, z)),
            Vector3::from(self.translation),
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformRecord {
    pub stack_id: usize,
    pub slice_index: usize,
    pub quaternion: [f64; 4],
    pub translation: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SidecarFile {
    format: String,
    version: u32,
    transforms: Vec<TransformRecord>,
}

/// Label per-slice transforms (stack-then-slice order) with their slice ids.
pub fn transform_records(stacks: &SliceStack, transforms: &[RigidTransform]) -> Result<Vec<TransformRecord>, FormatError> {
    if transforms.len() != stacks.n_slices() {
        return Err(FormatError::validation(
            "transforms",
            format!("{} transforms for {} slices", transforms.len(), stacks.n_slices()),
        ));
    }
    Ok(stacks
        .slices()
        .zip(transforms)
        .map(|(s, t)| TransformRecord {
            stack_id: s.stack,
            slice_index: s.index,
            quaternion: t.wxyz(),
            translation: t.translation.into(),
        })
        .collect())
}

pub fn encode_transforms(records: &[TransformRecord]) -> String {
    let file = SidecarFile {
        format: "transforms".into(),
        version: SIDECAR_VERSION,
        transforms: records.to_vec(),
    };
    serde_json::to_string_pretty(&file).expect("sidecar serializes") + "\n"
}

pub fn decode_transforms(text: &str) -> Result<Vec<TransformRecord>, FormatError> {
    let file: SidecarFile = super::container::parse_metadata(text)?;
    if file.format != "transforms" {
        return Err(FormatError::validation("format", format!("expected \"transforms\", found {:?}", file.format)));
    }
    if file.version != SIDECAR_VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: file.version,
            supported: SIDECAR_VERSION,
        });
    }
    for (i, r) in file.transforms.iter().enumerate() {
        PoseRecord {
            quaternion: r.quaternion,
            translation: r.translation,
        }
        .to_transform(&format!("transforms[{i}]"))?;
    }
    Ok(file.transforms)
}

/// Transforms of the records, checked against the slice layout of `stacks`.
pub fn records_to_transforms(stacks: &SliceStack, records: &[TransformRecord]) -> Result<Vec<RigidTransform>, FormatError> {
    if records.len() != stacks.n_slices() {
        return Err(FormatError::validation(
            "transforms",
            format!("{} records for {} slices", records.len(), stacks.n_slices()),
        ));
    }
    stacks
        .slices()
        .zip(records)
        .enumerate()
        .map(|(i, (s, r))| {
            if r.stack_id != s.stack || r.slice_index != s.index {
                return Err(FormatError::validation(
                    format!("transforms[{i}]"),
                    format!("expected slice ({}, {}), found ({}, {})", s.stack, s.index, r.stack_id, r.slice_index),
                ));
            }
            PoseRecord {
                quaternion: r.quaternion,
                translation: r.translation,
            }
            .to_transform(&format!("transforms[{i}]"))
        })
        .collect()
}

pub fn write_transforms(path: &Path, records: &[TransformRecord]) -> Result<()> {
    write_atomic(path, encode_transforms(records).as_bytes())
}

pub fn read_transforms(path: &Path) -> Result<Vec<TransformRecord>> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| FormatError::Metadata(format!("not UTF-8: {e}")))?;
    Ok(decode_transforms(text)?)
}
