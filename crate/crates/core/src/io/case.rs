//! Case manifests, run logs and metrics reports (all JSON text).

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::container::{parse_metadata, read_file, write_atomic, FormatError};
use crate::error::{Error, Result};
use crate::metrics::EvaluationReport;
use crate::objective::LossReport;
use crate::optimizer::{LogEntry, ReconConfig, ReconOutput};
use crate::phantom::{CaseSeeds, PhantomKind, Protocol};

pub const MANIFEST_VERSION: u32 = 1;

/// Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseFiles {
    pub stacks: String,
    pub truth_volume: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_gaussians: Option<String>,
    pub truth_transforms: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseManifest {
    pub format_version: u32,
    pub case_id: String,
    pub phantom_kind: PhantomKind,
    pub phantom_seed: u64,
    pub seeds: CaseSeeds,
    pub protocol: Protocol,
    pub files: CaseFiles,
}

impl CaseManifest {
    fn file_names(&self) -> impl Iterator<Item = &String> {
        [&self.files.stacks, &self.files.truth_volume, &self.files.truth_transforms]
            .into_iter()
            .chain(self.files.truth_gaussians.as_ref())
    }
}

pub fn encode_manifest(m: &CaseManifest) -> String {
    serde_json::to_string_pretty(m).expect("manifest serializes") + "\n"
}

pub fn decode_manifest(text: &str) -> Result<CaseManifest, FormatError> {
    let m: CaseManifest = parse_metadata(text)?;
    if m.format_version != MANIFEST_VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: m.format_version,
            supported: MANIFEST_VERSION,
        });
    }
    for name in m.file_names() {
        let p = Path::new(name);
        if name.is_empty() || p.is_absolute() || p.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
            return Err(FormatError::validation("files", format!("{name:?} must be a relative path inside the case directory")));
        }
    }
    Ok(m)
}

pub fn write_manifest(path: &Path, m: &CaseManifest) -> Result<()> {
    write_atomic(path, encode_manifest(m).as_bytes())
}

/// Read a manifest and check that every referenced file exists.
pub fn read_manifest(path: &Path) -> Result<CaseManifest> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| FormatError::Metadata(format!("not UTF-8: {e}")))?;
    let m = decode_manifest(text)?;
    for name in m.file_names() {
        let p = case_path(path, name);
        if !p.is_file() {
            return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "referenced by the case manifest")));
        }
    }
    Ok(m)
}

/// Resolve a manifest-relative file name.
pub fn case_path(manifest: &Path, name: &str) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join(name)
}

/// One line of a run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RunRecord {
    /// First line: the complete effective configuration.
    Config { version: u32, config: ReconConfig },
    Iteration(LogEntry),
    /// Last line.
    Summary {
        norm_scale: f64,
        initial_loss: LossReport,
        final_loss: LossReport,
    },
}

pub const RUN_LOG_VERSION: u32 = 1;

pub fn encode_run_log(cfg: &ReconConfig, out: &ReconOutput) -> String {
    let mut text = String::new();
    let mut push = |r: RunRecord| {
        text.push_str(&serde_json::to_string(&r).expect("run record serializes"));
        text.push('\n');
    };
    push(RunRecord::Config {
        version: RUN_LOG_VERSION,
        config: cfg.clone(),
    });
    for e in &out.log {
        push(RunRecord::Iteration(e.clone()));
    }
    push(RunRecord::Summary {
        norm_scale: out.norm_scale,
        initial_loss: out.initial_loss.clone(),
        final_loss: out.final_loss.clone(),
    });
    text
}

pub fn write_run_log(path: &Path, cfg: &ReconConfig, out: &ReconOutput) -> Result<()> {
    write_atomic(path, encode_run_log(cfg, out).as_bytes())
}

/// The effective config recorded on a run log's first line.
pub fn read_run_log_config(path: &Path) -> Result<ReconConfig> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut first = String::new();
    BufReader::new(f).read_line(&mut first).map_err(|e| Error::io(path, e))?;
    match parse_metadata::<RunRecord>(&first)? {
        RunRecord::Config { version, config } => {
            if version != RUN_LOG_VERSION {
                return Err(FormatError::UnsupportedVersion {
                    found: version,
                    supported: RUN_LOG_VERSION,
                }
                .into());
            }
            config.validate()?;
            Ok(config)
        }
        _ => Err(FormatError::validation("kind", "first run-log line must hold the config").into()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub case_id: String,
    #[serde(flatten)]
    pub evaluation: EvaluationReport,
}

pub fn write_metrics_report(path: &Path, report: &MetricsReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report).expect("report serializes") + "\n";
    write_atomic(path, text.as_bytes())
}

pub fn read_metrics_report(path: &Path) -> Result<MetricsReport> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| FormatError::Metadata(format!("not UTF-8: {e}")))?;
    Ok(parse_metadata(text)?)
}
