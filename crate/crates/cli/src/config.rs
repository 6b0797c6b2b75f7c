//! Versioned JSON configs with dotted-path overrides.
//!
//! A config starts from the command's defaults, takes the fields present in
//! an optional file, then applies `--set a.b=value` overrides in order.
//! Override values are parsed as JSON and fall back to plain strings, so
//! `--set ba.lr=1e-3` and `--set init=ground-truth` both work. Unknown
//! fields are rejected at every stage.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

pub fn load<T: Serialize + DeserializeOwned>(defaults: &T, file: Option<&Path>, sets: &[String]) -> Result<T, CliError> {
    let mut value = serde_json::to_value(defaults).expect("defaults serialize");
    if let Some(path) = file {
        let loaded: Value = nas3r_core::json::read(path)?;
        match loaded.get("version") {
            Some(v) if v.as_u64() == Some(CONFIG_VERSION as u64) => {}
            Some(v) => return Err(CliError::usage(format!("{}: unsupported config version {v}", path.display()))),
            None => return Err(CliError::usage(format!("{}: config has no `version` field", path.display()))),
        }
        merge(&mut value, loaded, "").map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    }
    for set in sets {
        apply_override(&mut value, set).map_err(CliError::usage)?;
    }
    let config: T = serde_json::from_value(value).map_err(|e| CliError::usage(format!("invalid config: {e}")))?;
    Ok(config)
}

fn merge(base: &mut Value, over: Value, prefix: &str) -> Result<(), String> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &path)?,
                    None => return Err(format!("unknown config field `{path}`")),
                }
            }
            Ok(())
        }
        (b, o) => {
            *b = o;
            Ok(())
        }
    }
}

fn apply_override(value: &mut Value, set: &str) -> Result<(), String> {
    let (path, raw) = set
        .split_once('=')
        .ok_or_else(|| format!("override `{set}` is not of the form key.path=value"))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = value;
    for key in path.split('.') {
        let obj: &mut Map<String, Value> = slot
            .as_object_mut()
            .ok_or_else(|| format!("`{path}`: `{key}` is not inside an object"))?;
        slot = obj.get_mut(key).ok_or_else(|| format!("unknown config field `{path}`"))?;
    }
    *slot = parsed;
    Ok(())
}

pub fn check_version(version: u32) -> Result<(), CliError> {
    if version != CONFIG_VERSION {
        return Err(CliError::usage(format!("unsupported config version {version}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    #[serde(deny_unknown_fields)]
    struct Inner {
        lr: f64,
        name: String,
    }

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    #[serde(deny_unknown_fields)]
    struct Outer {
        version: u32,
        seed: u64,
        inner: Inner,
    }

    fn defaults() -> Outer {
        Outer {
            version: 1,
            seed: 0,
            inner: Inner {
                lr: 0.5,
                name: "a".into(),
            },
        }
    }

    #[test]
    fn overrides_follow_dotted_paths() {
        let c: Outer = load(&defaults(), None, &["inner.lr=1e-3".into(), "inner.name=b=c".into(), "seed=7".into()]).unwrap();
        assert_eq!(c.inner.lr, 1e-3);
        assert_eq!(c.inner.name, "b=c");
        assert_eq!(c.seed, 7);
    }

    #[test]
    fn unknown_fields_and_versions_are_rejected() {
        assert!(load(&defaults(), None, &["inner.lrr=1".into()]).is_err());
        assert!(load(&defaults(), None, &["seed.x=1".into()]).is_err());
        assert!(load(&defaults(), None, &["seed".into()]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.json");
        std::fs::write(&f, r#"{"version": 1, "inner": {"lr": 2.0}}"#).unwrap();
        let c: Outer = load(&defaults(), Some(&f), &[]).unwrap();
        assert_eq!((c.inner.lr, c.inner.name.as_str()), (2.0, "a"));
        std::fs::write(&f, r#"{"inner": {"lr": 2.0}}"#).unwrap();
        assert!(load(&defaults(), Some(&f), &[]).is_err());
        std::fs::write(&f, r#"{"version": 2}"#).unwrap();
        assert!(load(&defaults(), Some(&f), &[]).is_err());
        std::fs::write(&f, r#"{"version": 1, "typo": 3}"#).unwrap();
        assert!(load(&defaults(), Some(&f), &[]).is_err());
    }
}
