//! TOML reconstruction configs.
//!
//! A file may name a base with `preset = "paper" | "desk"` (default "paper");
//! every other key overrides that base. Tables merge key by key, arrays such
//! as `stages` replace the base array wholesale. Unknown keys are errors.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::container::{read_file, FormatError};
use crate::error::{Error, Result};
use crate::optimizer::ReconConfig;
use crate::phantom::Protocol;

/// Named starting points for a config.
pub fn preset(name: &str) -> Result<ReconConfig> {
    match name {
        "paper" => Ok(ReconConfig::paper()),
        "desk" => Ok(ReconConfig::desk()),
        other => Err(Error::validation("preset", format!("unknown preset {other:?} (expected \"paper\" or \"desk\")"))),
    }
}

fn merge(base: &mut toml::Table, overrides: toml::Table) {
    for (k, v) in overrides {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_with_preset<T>(text: &str, default_preset: &str, presets: impl Fn(&str) -> Result<T>) -> Result<T>
where
    T: Serialize + DeserializeOwned,
{
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| FormatError::Metadata(e.message().to_string()))?;
    let name = match table.remove("preset") {
        None => default_preset.to_string(),
        Some(toml::Value::String(s)) => s,
        Some(_) => return Err(Error::validation("preset", "must be a string")),
    };
    let base = presets(&name)?;
    let mut merged = match toml::Value::try_from(&base).expect("preset serializes") {
        toml::Value::Table(t) => t,
        _ => unreachable!("preset serializes to a table"),
    };
    merge(&mut merged, table);
    serde_path_to_error::deserialize(toml::Value::Table(merged)).map_err(|e| {
        let path = e.path().to_string();
        Error::validation(if path == "." { String::new() } else { path }, e.into_inner().message().to_string())
    })
}

/// Parse and validate a config given as TOML text.
pub fn parse_config_str(text: &str) -> Result<ReconConfig> {
    parse_config_str_with(text, "paper")
}

/// As [`parse_config_str`], with `default_preset` as the base when the text names none.
pub fn parse_config_str_with(text: &str, default_preset: &str) -> Result<ReconConfig> {
    let cfg = parse_with_preset(text, default_preset, preset)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Named acquisition protocols.
pub fn protocol_preset(name: &str) -> Result<Protocol> {
    match name {
        "paper" => Ok(Protocol::paper()),
        "desk" => Ok(Protocol::desk()),
        other => Err(Error::validation("preset", format!("unknown preset {other:?} (expected \"paper\" or \"desk\")"))),
    }
}

/// Parse and validate an acquisition protocol given as TOML text.
pub fn parse_protocol_str(text: &str, default_preset: &str) -> Result<Protocol> {
    let p = parse_with_preset(text, default_preset, protocol_preset)?;
    p.validate()?;
    Ok(p)
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = read_file(path)?;
    String::from_utf8(bytes).map_err(|e| FormatError::Metadata(format!("{}: not UTF-8: {e}", path.display())).into())
}

pub fn parse_protocol(path: &Path, default_preset: &str) -> Result<Protocol> {
    parse_protocol_str(&read_text(path)?, default_preset)
}

pub fn parse_config(path: &Path) -> Result<ReconConfig> {
    parse_config_str(&read_text(path)?)
}

pub fn parse_config_with(path: &Path, default_preset: &str) -> Result<ReconConfig> {
    parse_config_str_with(&read_text(path)?, default_preset)
}

/// The complete effective config as TOML; parsing it back yields the same config.
pub fn config_to_toml(cfg: &ReconConfig) -> String {
    toml::to_string(cfg).expect("config serializes to TOML")
}
