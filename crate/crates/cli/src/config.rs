//! Config files and `key=value` overrides.
//!
//! A train config file is a flat JSON object of `TrainConfig` fields plus an
//! optional `"preset"` key naming the profile the fields are applied over.

use std::fs;
use std::path::Path;

use clzsl_core::{SynthConfig, TrainConfig};
use serde_json::{Map, Value};

use crate::error::{CliError, Result};

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn syntax_error(path: &Path, e: &serde_json::Error) -> CliError {
    CliError::ConfigSyntax {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

/// 1-based line of the first occurrence of `"key"` in `text`.
fn key_line(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map(|i| i + 1)
}

/// Reads a JSON object, reporting syntax errors by line and column.
pub fn read_object(path: &Path) -> Result<(Map<String, Value>, String)> {
    let text = read_text(path)?;
    let value: Value = serde_json::from_str(&text).map_err(|e| syntax_error(path, &e))?;
    match value {
        Value::Object(map) => Ok((map, text)),
        _ => Err(CliError::ConfigSyntax {
            path: path.to_path_buf(),
            line: 1,
            column: 1,
            message: "expected a JSON object".into(),
        }),
    }
}

pub fn read_synth_config(path: &Path) -> Result<SynthConfig> {
    let text = read_text(path)?;
    let config: SynthConfig = serde_json::from_str(&text).map_err(|e| syntax_error(path, &e))?;
    config.validate().map_err(|e| CliError::ConfigField {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(config)
}

/// Parses `key=value`. The value is read as JSON, falling back to a bare string.
pub fn parse_assignment(s: &str) -> Result<(String, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("expected key=value, got {s:?}")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(CliError::Usage(format!("empty key in {s:?}")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    Ok((key.to_string(), value))
}

#[derive(Debug, Clone, Default)]
pub struct TrainOverrides {
    pub config_file: Option<std::path::PathBuf>,
    pub preset: Option<String>,
    pub sets: Vec<(String, Value)>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub no_pcl: bool,
    pub no_pup: bool,
}

/// Preset, then file fields in file order, then `--set`, then dedicated flags.
pub fn resolve_train_config(o: &TrainOverrides) -> Result<TrainConfig> {
    let file = match &o.config_file {
        Some(path) => Some((path.as_path(), read_object(path)?)),
        None => None,
    };
    let file_preset = match file.as_ref().and_then(|(_, (map, _))| map.get("preset")) {
        None => None,
        Some(Value::String(name)) => Some(name.clone()),
        Some(_) => {
            let (path, (_, text)) = file.as_ref().expect("preset came from the file");
            return Err(field_error(path, text, "preset", "preset must be a string"));
        }
    };
    let mut config = match o.preset.as_deref().or(file_preset.as_deref()) {
        Some(name) => TrainConfig::preset(name)?,
        None => TrainConfig::default(),
    };
    if let Some((path, (map, text))) = &file {
        for (key, value) in map.iter().filter(|(k, _)| k.as_str() != "preset") {
            config
                .set_field(key, value.clone())
                .map_err(|e| field_error(path, text, key, &e.to_string()))?;
        }
    }
    for (key, value) in &o.sets {
        config
            .set_field(key, value.clone())
            .map_err(|e| CliError::Usage(format!("--set {key}: {e}")))?;
    }
    if let Some(seed) = o.seed {
        config.seed = seed;
    }
    if let Some(epochs) = o.epochs {
        config.epochs = epochs;
    }
    if o.no_pcl {
        config.use_pcl = false;
    }
    if o.no_pup {
        config.use_pup = false;
    }
    config.validate()?;
    Ok(config)
}

fn field_error(path: &Path, text: &str, key: &str, message: &str) -> CliError {
    let message = match key_line(text, key) {
        Some(line) => format!("line {line}: {message}"),
        None => message.to_string(),
    };
    CliError::ConfigField {
        path: path.to_path_buf(),
        message,
    }
}
