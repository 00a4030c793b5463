//! Bundled scenarios. They are plain configuration data and run through
//! the same engine as any user scenario.

use thiserror::Error;

use crate::sim::config::ScenarioConfig;
use crate::sim::validate::{validate_str, ConfigError};

pub const PRESET_NAMES: [&str; 3] = ["clinical", "industrial", "judicial"];

#[derive(Debug, Error, PartialEq)]
pub enum PresetError {
    #[error("unknown preset `{0}` (expected one of clinical, industrial, judicial)")]
    UnknownPreset(String),
    #[error("bundled preset `{0}` is invalid: {1}")]
    Invalid(String, ConfigError),
}

pub fn preset_json(name: &str) -> Option<&'static str> {
    match name {
        "clinical" => Some(include_str!("../../presets/clinical.json")),
        "industrial" => Some(include_str!("../../presets/industrial.json")),
        "judicial" => Some(include_str!("../../presets/judicial.json")),
        _ => None,
    }
}

pub fn load_preset(name: &str) -> Result<ScenarioConfig, PresetError> {
    let text = preset_json(name).ok_or_else(|| PresetError::UnknownPreset(name.to_string()))?;
    validate_str(text).map_err(|e| PresetError::Invalid(name.to_string(), e))
}
