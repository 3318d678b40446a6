//! Layered settings: built-in defaults, then the command's table of a TOML
//! file, then command-line flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::fail::CliError;

/// Flag overrides as a JSON object keyed by dotted paths.
#[derive(Default)]
pub struct Patch(Map<String, Value>);

impl Patch {
    pub fn set<T: Serialize>(&mut self, path: &str, v: &Option<T>) -> &mut Self {
        if let Some(v) = v {
            let value = serde_json::to_value(v).expect("flag values serialize");
            insert_path(&mut self.0, path, value);
        }
        self
    }

    pub fn flag(&mut self, path: &str, on: bool) -> &mut Self {
        if on {
            insert_path(&mut self.0, path, Value::Bool(true));
        }
        self
    }

    pub fn into_value(self) -> Value {
        Value::Object(self.0)
    }
}

fn insert_path(obj: &mut Map<String, Value>, path: &str, value: Value) {
    match path.split_once('.') {
        None => {
            obj.insert(path.to_string(), value);
        }
        Some((head, rest)) => {
            let child = obj
                .entry(head.to_string())
                .or_insert_with(|| Value::Object(Map::new()));
            if let Value::Object(m) = child {
                insert_path(m, rest, value);
            }
        }
    }
}

/// Reads the table for `command` from a TOML file. A file without such a
/// table is taken to hold the command's settings at top level.
pub fn command_table(path: &Path, command: &str) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("cannot read config {}: {e}", path.display())))?;
    let doc: toml::Table = toml::from_str(&text)
        .map_err(|e| CliError::io(format!("config {} is not valid TOML: {e}", path.display())))?;
    let value = serde_json::to_value(&doc).expect("TOML tables convert to JSON");
    Ok(match value {
        Value::Object(mut m) if matches!(m.get(command), Some(Value::Object(_))) => {
            m.remove(command).expect("checked above")
        }
        other => other,
    })
}

/// Overlays `patch` onto `base`, rejecting keys that `base` does not have.
fn merge(base: &mut Value, patch: Value, at: &str) -> Result<(), CliError> {
    let Value::Object(patch) = patch else {
        *base = patch;
        return Ok(());
    };
    let Value::Object(target) = base else {
        return Err(CliError::usage(format!("setting {at} is not a table")));
    };
    for (k, v) in patch {
        let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
        match target.get_mut(&k) {
            None => return Err(CliError::usage(format!("unknown setting {path}"))),
            // a different variant of a `mode`-tagged enum replaces the old one whole
            Some(slot) if slot.get("mode").is_some() && v.get("mode").is_some_and(|m| Some(m) != slot.get("mode")) => {
                *slot = v
            }
            Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &path)?,
            Some(slot) => *slot = v,
        }
    }
    Ok(())
}

/// Resolves settings: `base`, overlaid by the config table, overlaid by flags.
pub fn resolve<T: Serialize + DeserializeOwned>(
    base: T,
    file: Option<Value>,
    flags: Patch,
) -> Result<T, CliError> {
    let mut v = serde_json::to_value(base).expect("settings serialize");
    if let Some(f) = file {
        merge(&mut v, f, "")?;
    }
    merge(&mut v, flags.into_value(), "")?;
    serde_json::from_value(v).map_err(|e| CliError::usage(format!("invalid settings: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    struct Inner {
        lr: f64,
        steps: usize,
    }

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    struct Outer {
        name: Option<String>,
        inner: Inner,
    }

    #[test]
    fn flags_win_over_file_and_file_over_defaults() {
        let file = serde_json::json!({"name": "a", "inner": {"lr": 0.5, "steps": 3}});
        let mut flags = Patch::default();
        flags.set("inner.steps", &Some(7usize));
        let got: Outer = resolve(Outer::default(), Some(file), flags).unwrap();
        assert_eq!(
            got,
            Outer {
                name: Some("a".into()),
                inner: Inner { lr: 0.5, steps: 7 }
            }
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let file = serde_json::json!({"inner": {"lr": 0.5, "typo": 1}});
        let err = resolve(Outer::default(), Some(file), Patch::default()).unwrap_err();
        assert_eq!(err.code, 1);
        assert!(err.message.contains("inner.typo"), "{}", err.message);
    }
}
