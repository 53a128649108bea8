//! File formats and configuration parsing.

mod case;
mod config;
mod container;
mod formats;
mod pgm;
mod transforms;

pub use case::{
    case_path, decode_manifest, encode_manifest, encode_run_log, read_manifest, read_metrics_report, read_run_log_config, write_manifest,
    write_metrics_report, write_run_log, CaseFiles, CaseManifest, MetricsReport, RunRecord, MANIFEST_VERSION, RUN_LOG_VERSION,
};
pub use config::{
    config_to_toml, parse_config, parse_config_str, parse_config_str_with, parse_config_with, parse_protocol, parse_protocol_str, preset,
    protocol_preset,
};
pub use container::{write_atomic, FormatError};
pub use formats::{
    decode_adam, decode_gaussians, decode_stack, decode_volume, encode_adam, encode_gaussians, encode_stack, encode_volume, read_adam,
    read_gaussians, read_stack, read_volume, stack_sidecar, write_adam, write_gaussians, write_stack, write_volume, FORMAT_VERSION,
    GADM_MAGIC, GGAU_MAGIC, GSTK_MAGIC, GVOL_MAGIC,
};
pub use pgm::{cross_section, encode_pgm, export_cross_sections};
pub use transforms::{
    decode_transforms, encode_transforms, read_transforms, records_to_transforms, transform_records, write_transforms, PoseRecord,
    TransformRecord, SIDECAR_VERSION,
};
