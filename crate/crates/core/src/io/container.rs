//! Shared container layout for the GVOL / GSTK / GGAU / GADM formats.
//!
//! ```text
//! offset 0   4 bytes   magic
//! offset 4   u32 LE    format version
//! offset 8   u64 LE    metadata length in bytes
//! offset 16  ...       metadata, UTF-8 JSON object
//! ...        ...       payload, little-endian f32 (or f64 for GADM)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const HEADER_LEN: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("file truncated: {0}")]
    Truncated(String),

    #[error("payload size mismatch: metadata implies {expected} bytes, file holds {found}")]
    SizeMismatch { expected: u64, found: u64 },

    #[error("malformed metadata: {0}")]
    Metadata(String),

    #[error("invalid `{field}`: {reason}")]
    Validation { field: String, reason: String },

    #[error("unsupported payload encoding `{0}` (only little-endian f32 is supported)")]
    UnsupportedEncoding(String),
}

impl FormatError {
    /// Stable machine-readable code for each failure class.
    pub fn code(&self) -> &'static str {
        match self {
            FormatError::BadMagic { .. } => "bad-magic",
            FormatError::UnsupportedVersion { .. } => "unsupported-version",
            FormatError::Truncated(_) => "truncated",
            FormatError::SizeMismatch { .. } => "size-mismatch",
            FormatError::Metadata(_) => "metadata",
            FormatError::Validation { .. } => "validation",
            FormatError::UnsupportedEncoding(_) => "unsupported-encoding",
        }
    }

    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        FormatError::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

impl From<crate::error::Error> for FormatError {
    fn from(e: crate::error::Error) -> Self {
        match e {
            Error::Validation { field, reason } => FormatError::Validation { field, reason },
            Error::Format(f) => f,
            other => FormatError::validation("payload", other.to_string()),
        }
    }
}

pub(crate) fn encode(magic: &[u8; 4], version: u32, metadata: &str, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + metadata.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(metadata.len() as u64).to_le_bytes());
    out.extend_from_slice(metadata.as_bytes());
    out.extend_from_slice(payload);
    out
}

pub(crate) struct Decoded<'a> {
    pub metadata: &'a str,
    pub payload: &'a [u8],
}

pub(crate) fn decode<'a>(bytes: &'a [u8], magic: &[u8; 4], version: u32) -> Result<Decoded<'a>, FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated(format!("{} bytes, header needs {HEADER_LEN}", bytes.len())));
    }
    if &bytes[..4] != magic {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated(format!("{} bytes, header needs {HEADER_LEN}", bytes.len())));
    }
    let found = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if found != version {
        return Err(FormatError::UnsupportedVersion { found, supported: version });
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let rest = (bytes.len() - HEADER_LEN) as u64;
    if meta_len > rest {
        return Err(FormatError::Truncated(format!("metadata declares {meta_len} bytes, {rest} remain")));
    }
    let meta_end = HEADER_LEN + meta_len as usize;
    let metadata = std::str::from_utf8(&bytes[HEADER_LEN..meta_end])
        .map_err(|e| FormatError::Metadata(format!("metadata is not UTF-8: {e}")))?;
    Ok(Decoded {
        metadata,
        payload: &bytes[meta_end..],
    })
}

pub(crate) fn parse_metadata<T: serde::de::DeserializeOwned>(text: &str) -> Result<T, FormatError> {
    serde_json::from_str(text).map_err(|e| FormatError::Metadata(e.to_string()))
}

pub(crate) fn f32_payload(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values.into_iter().flat_map(|v| (v as f32).to_le_bytes()).collect()
}

/// Decode exactly `count` little-endian f32 values.
pub(crate) fn read_f32s(payload: &[u8], count: usize) -> Result<Vec<f64>, FormatError> {
    let expected = (count as u64).checked_mul(4).ok_or_else(|| FormatError::validation("payload", "element count overflows"))?;
    if payload.len() as u64 != expected {
        return Err(FormatError::SizeMismatch {
            expected,
            found: payload.len() as u64,
        });
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect())
}

pub(crate) fn check_encoding(encoding: &str) -> Result<(), FormatError> {
    if encoding == "f32le" {
        Ok(())
    } else {
        Err(FormatError::UnsupportedEncoding(encoding.to_string()))
    }
}

pub(crate) fn checked_product(dims: &[usize], field: &str) -> Result<usize, FormatError> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= (1usize << 40))
        .ok_or_else(|| FormatError::validation(field, "dimension product overflows"))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Write via a temporary sibling and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
