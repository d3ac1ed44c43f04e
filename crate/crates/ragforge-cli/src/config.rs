//! Training-configuration loading: a JSON file is merged over the built-in
//! defaults, so a partial (or empty) file is always acceptable. Unknown keys
//! warn and are ignored; range violations are reported all at once by the
//! configuration's own validator.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::Value;

use ragforge_core::trainer::TrainConfig;

pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let user: Value = if text.trim().is_empty() {
        Value::Object(Default::default())
    } else {
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
    };
    if !user.is_object() {
        bail!("config {} must be a JSON object", path.display());
    }
    let mut merged = serde_json::to_value(TrainConfig::default()).expect("defaults serialize");
    let mut unknown = Vec::new();
    merge_into(&mut merged, user, "", &mut unknown);
    for key in &unknown {
        log::warn!("config {}: unknown key `{key}` ignored", path.display());
    }
    let config: TrainConfig = serde_json::from_value(merged)
        .with_context(|| format!("config {}", path.display()))?;
    config
        .validate()
        .with_context(|| format!("config {}", path.display()))?;
    Ok(config)
}

/// Overlays `user` onto `base`. Objects merge key-by-key recursively; any
/// other value replaces the default wholesale. Keys with no counterpart in
/// the defaults are collected (dotted paths) instead of merged.
fn merge_into(base: &mut Value, user: Value, prefix: &str, unknown: &mut Vec<String>) {
    match (base, user) {
        (Value::Object(base), Value::Object(user)) => {
            for (key, val) in user {
                let path = if prefix.is_empty() {
                    key.clone()
                } else {
                    format!("{prefix}.{key}")
                };
                match base.get_mut(&key) {
                    Some(slot) => merge_into(slot, val, &path, unknown),
                    None => unknown.push(path),
                }
            }
        }
        (slot, val) => *slot = val,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ragforge_core::trainer::TrainMode;
    use std::io::Write;

    fn write_config(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn empty_file_yields_all_defaults() {
        let f = write_config("");
        let config = load_train_config(f.path()).unwrap();
        assert_eq!(config, TrainConfig::default());
        assert_eq!(config.k, 5);
        assert_eq!(config.mode, TrainMode::End2end);
        assert_eq!(config.epochs, 10);
    }

    #[test]
    fn partial_nested_objects_keep_unmentioned_defaults() {
        let f = write_config(r#"{"epochs": 3, "adam": {"lr": 0.5}, "refresh": {"n_shards": 3}}"#);
        let config = load_train_config(f.path()).unwrap();
        assert_eq!(config.epochs, 3);
        assert_eq!(config.adam.lr, 0.5);
        assert_eq!(config.adam.beta1, TrainConfig::default().adam.beta1);
        assert_eq!(config.refresh.n_shards, 3);
        assert_eq!(
            config.refresh.refresh_every,
            TrainConfig::default().refresh.refresh_every
        );
    }

    #[test]
    fn unknown_keys_are_ignored_not_fatal() {
        let f = write_config(r#"{"k": 7, "learning_rate": 1.0, "adam": {"momentum": 0.9}}"#);
        let config = load_train_config(f.path()).unwrap();
        assert_eq!(config.k, 7);
        assert_eq!(config.adam, TrainConfig::default().adam);
    }

    #[test]
    fn all_range_violations_are_reported_together() {
        let f = write_config(r#"{"k": 0, "epochs": 0, "tau": -1.0}"#);
        let err = format!("{:#}", load_train_config(f.path()).unwrap_err());
        assert!(err.contains("k must be"), "missing k violation: {err}");
        assert!(err.contains("epochs must be"), "missing epochs violation: {err}");
        assert!(err.contains("tau must be"), "missing tau violation: {err}");
    }

    #[test]
    fn type_violations_name_the_config_file() {
        let f = write_config(r#"{"epochs": "ten"}"#);
        let err = format!("{:#}", load_train_config(f.path()).unwrap_err());
        assert!(err.contains("config"), "error should reference the file: {err}");
    }

    #[test]
    fn non_object_root_is_rejected() {
        let f = write_config("[1, 2]");
        assert!(load_train_config(f.path()).is_err());
    }
}
