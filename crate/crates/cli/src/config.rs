//! JSON configuration files with `--set key.path=value` overrides.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::CliError;

/// Applies one `a.b.c=value` override. The value is parsed as JSON when it
/// parses, otherwise taken as a string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<(), CliError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{spec}`")))?;
    if path.is_empty() {
        return Err(CliError::Usage(format!("--set has an empty key in `{spec}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            return Err(CliError::Usage(format!("--set {path}: `{}` is not an object", parts[..i].join("."))));
        }
        let obj = cur.as_object_mut().expect("checked");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last part")
}

/// Loads `T` from an optional JSON file layered over `T::default()`, then applies overrides.
pub fn load_config<T>(path: Option<&Path>, overrides: &[String]) -> Result<T, CliError>
where
    T: Serialize + DeserializeOwned + Default,
{
    let mut v = serde_json::to_value(T::default()).expect("defaults serialize");
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| bttf_core::Error::io(p, e))?;
        let file: Value = serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
        merge(&mut v, file);
    }
    for o in overrides {
        apply_override(&mut v, o)?;
    }
    serde_json::from_value(v).map_err(|e| CliError::Validation(format!("config: {e}")))
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_nest_and_parse() {
        let mut v = json!({"a": {"b": 1}, "c": "x"});
        apply_override(&mut v, "a.b=2.5").unwrap();
        apply_override(&mut v, "c=hello").unwrap();
        apply_override(&mut v, "d.e=[1,2]").unwrap();
        assert_eq!(v, json!({"a": {"b": 2.5}, "c": "hello", "d": {"e": [1, 2]}}));
        assert!(apply_override(&mut v, "novalue").is_err());
        assert!(apply_override(&mut v, "c.x=1").is_err());
    }

    #[test]
    fn merge_keeps_unmentioned_defaults() {
        let mut base = json!({"a": {"b": 1, "c": 2}});
        merge(&mut base, json!({"a": {"c": 3}}));
        assert_eq!(base, json!({"a": {"b": 1, "c": 3}}));
    }
}
