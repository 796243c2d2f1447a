//! JSON experiment configs: schema-versioned files, named variant
//! presets, and dotted-path `--set KEY=VALUE` overrides.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::grid::apply_variant;
use crate::trainer::ExperimentConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("schema violation at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("override targets unknown key `{0}`")]
    UnknownOverride(String),
    #[error("malformed override `{0}`: expected KEY=VALUE")]
    MalformedOverride(String),
    #[error("unknown variant preset `{0}`")]
    UnknownVariant(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub schema_version: u32,
    #[serde(default)]
    pub output_dir: Option<String>,
    /// Named preset applied on top of the parsed experiment config;
    /// explicit keys and `--set` overrides win.
    #[serde(default)]
    pub variant: Option<String>,
    #[serde(default)]
    pub experiment: ExperimentConfig,
}

impl ConfigFile {
    pub fn minimal() -> Self {
        ConfigFile {
            schema_version: SCHEMA_VERSION,
            output_dir: None,
            variant: None,
            experiment: ExperimentConfig::default(),
        }
    }
}

fn schema_err(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Schema {
        path: path.to_string(),
        message: message.into(),
    }
}

/// Parse, apply the variant preset, apply overrides, validate.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<ConfigFile, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let value: Value = serde_json::from_str(&text)?;
    from_value(value, overrides)
}

pub fn from_value(value: Value, overrides: &[String]) -> Result<ConfigFile, ConfigError> {
    let obj = value
        .as_object()
        .ok_or_else(|| schema_err("/", "top level must be a JSON object"))?;
    match obj.get("schema_version") {
        None => return Err(schema_err("/schema_version", "mandatory field is absent")),
        Some(v) => {
            let version = v
                .as_u64()
                .ok_or_else(|| schema_err("/schema_version", "must be an unsigned integer"))?;
            if version != SCHEMA_VERSION as u64 {
                return Err(schema_err(
                    "/schema_version",
                    format!("unsupported version {version}, expected {SCHEMA_VERSION}"),
                ));
            }
        }
    }
    let mut cfg: ConfigFile = serde_json::from_value(value).map_err(|e| ConfigError::Schema {
        path: "/".into(),
        message: e.to_string(),
    })?;
    // an override may itself choose the preset; the preset applies first
    // so that the remaining overrides win over it
    let mut rest: Vec<&String> = Vec::with_capacity(overrides.len());
    for raw in overrides {
        let (key, val) = raw
            .split_once('=')
            .ok_or_else(|| ConfigError::MalformedOverride(raw.clone()))?;
        if key.trim() == "variant" {
            cfg.variant = Some(val.trim().trim_matches('"').to_string());
        } else {
            rest.push(raw);
        }
    }
    if let Some(name) = cfg.variant.clone() {
        apply_variant(&mut cfg.experiment, &name)
            .map_err(|_| ConfigError::UnknownVariant(name))?;
    }
    if !rest.is_empty() {
        let mut value = serde_json::to_value(&cfg).expect("config serializes");
        for raw in rest {
            let (key, val) = raw.split_once('=').expect("checked above");
            apply_override(&mut value, key.trim(), val.trim())?;
        }
        cfg = serde_json::from_value(value).map_err(|e| ConfigError::Schema {
            path: "/".into(),
            message: e.to_string(),
        })?;
    }
    cfg.experiment
        .validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(cfg)
}

/// Candidate key paths for one override. `gate.variant` resolves to
/// `experiment.gate_variant`; fully qualified paths work as written.
fn candidate_paths(key: &str) -> Vec<Vec<String>> {
    let segs: Vec<String> = key.split('.').map(str::to_string).collect();
    let joined = segs.join("_");
    let mut out = vec![segs.clone()];
    let mut prefixed = vec!["experiment".to_string()];
    prefixed.extend(segs);
    out.push(prefixed);
    out.push(vec![joined.clone()]);
    out.push(vec!["experiment".to_string(), joined]);
    out
}

fn apply_override(root: &mut Value, key: &str, raw: &str) -> Result<(), ConfigError> {
    // value literals are JSON; bare words fall back to strings
    let val: Value = serde_json::from_str(raw).unwrap_or(Value::String(raw.to_string()));
    for path in candidate_paths(key) {
        if try_set(root, &path, &val) {
            return Ok(());
        }
    }
    Err(ConfigError::UnknownOverride(key.to_string()))
}

/// Set only if every segment, including the leaf, already exists.
fn try_set(root: &mut Value, path: &[String], val: &Value) -> bool {
    let mut cursor = root;
    for seg in &path[..path.len() - 1] {
        match cursor.get_mut(seg) {
            Some(next) => cursor = next,
            None => return false,
        }
    }
    let leaf = &path[path.len() - 1];
    match cursor.as_object_mut() {
        Some(map) if map.contains_key(leaf) => {
            map.insert(leaf.clone(), val.clone());
            true
        }
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gating::GateVariant;
    use serde_json::json;

    #[test]
    fn minimal_config_roundtrips() {
        let cfg = from_value(json!({"schema_version": 1}), &[]).unwrap();
        assert_eq!(cfg.experiment, ExperimentConfig::default());
    }

    #[test]
    fn missing_schema_version_names_the_path() {
        let err = from_value(json!({}), &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("/schema_version"), "{msg}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = from_value(
            json!({"schema_version": 1, "experiment": {"tua": 0.9}}),
            &[],
        )
        .unwrap_err();
        assert!(err.to_string().contains("tua"), "{err}");
    }

    #[test]
    fn dotted_override_reaches_nested_fields() {
        let cfg = from_value(
            json!({"schema_version": 1}),
            &[
                "gate.variant=strict".into(),
                "tau=0.9".into(),
                "experiment.task.noise_sigma=0.5".into(),
                "seeds=[4,5]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.experiment.gate_variant, GateVariant::Strict);
        assert_eq!(cfg.experiment.tau, 0.9);
        assert_eq!(cfg.experiment.task.noise_sigma, 0.5);
        assert_eq!(cfg.experiment.seeds, vec![4, 5]);
    }

    #[test]
    fn override_of_unknown_key_errors() {
        let err = from_value(json!({"schema_version": 1}), &["no_such_key=1".into()])
            .unwrap_err();
        assert!(matches!(err, ConfigError::UnknownOverride(_)));
        let err =
            from_value(json!({"schema_version": 1}), &["garbage".into()]).unwrap_err();
        assert!(matches!(err, ConfigError::MalformedOverride(_)));
    }

    #[test]
    fn variant_preset_applies_before_overrides() {
        let cfg = from_value(
            json!({"schema_version": 1, "variant": "supervised_only"}),
            &["lambda_dar=0.25".into()],
        )
        .unwrap();
        assert_eq!(cfg.experiment.lambda_cdcr, 0.0);
        assert_eq!(cfg.experiment.lambda_cmpa, 0.0);
        assert_eq!(cfg.experiment.lambda_dar, 0.25);
        assert!(matches!(
            from_value(json!({"schema_version": 1, "variant": "nope"}), &[]),
            Err(ConfigError::UnknownVariant(_))
        ));
    }

    #[test]
    fn invalid_values_fail_validation() {
        let err = from_value(json!({"schema_version": 1}), &["tau=1.5".into()]).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
    }
}
