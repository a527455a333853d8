//! Layered JSON configuration: typed defaults, then a config file, then
//! individual overrides, validated by deserializing the merged value.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, IoContext, Result};

/// Recursively overlays `top` onto `base`. Objects merge key by key; any
/// other value replaces what was there.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Builds `{"a": {"b": value}}` from the dotted key `a.b`.
pub fn nested(key: &str, value: Value) -> Value {
    key.rsplit('.').fold(value, |acc, part| {
        let mut m = Map::new();
        m.insert(part.to_string(), acc);
        Value::Object(m)
    })
}

pub fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).at(path)?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
}

/// Applies `file` and then each `(dotted key, value)` override to the
/// serialized defaults and decodes the result.
pub fn resolve<T: Serialize + DeserializeOwned>(
    defaults: &T,
    file: Option<Value>,
    overrides: impl IntoIterator<Item = (String, Value)>,
) -> Result<T> {
    let mut merged = serde_json::to_value(defaults)?;
    if let Some(f) = file {
        if !f.is_object() {
            return Err(Error::config("config file must hold a JSON object"));
        }
        merge(&mut merged, f);
    }
    for (key, value) in overrides {
        merge(&mut merged, nested(&key, value));
    }
    serde_json::from_value(merged).map_err(|e| Error::config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use radtex_core::train::{Mode, RunSpec};
    use serde_json::json;

    #[test]
    fn merge_is_deep() {
        let mut base = json!({"a": {"b": 1, "c": 2}, "d": [1, 2]});
        merge(&mut base, json!({"a": {"c": 3}, "d": [9], "e": null}));
        assert_eq!(base, json!({"a": {"b": 1, "c": 3}, "d": [9], "e": null}));
    }

    #[test]
    fn flags_override_file_over_defaults() {
        let defaults = RunSpec::for_mode(Mode::Pretrain);
        let file = json!({"epochs": 3, "max_lr": 0.01, "augment": {"rotation": 5.0}});
        let spec = resolve(&defaults, Some(file), [("epochs".into(), json!(7)), ("augment.translation".into(), json!(0.0))]).unwrap();
        assert_eq!(spec.epochs, 7);
        assert_eq!(spec.max_lr, 0.01);
        assert_eq!(spec.augment.rotation, 5.0);
        assert_eq!(spec.augment.translation, 0.0);
        assert_eq!(spec.batch_size, defaults.batch_size);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let defaults = RunSpec::for_mode(Mode::Scratch);
        let err = resolve(&defaults, Some(json!({"epoch": 3})), []).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(resolve(&defaults, Some(json!([1])), []).is_err());
    }
}
