//! Layered run configuration: config file < `MMKWS_*` environment < flags.
//!
//! The config file is TOML restricted to scalar values. Top-level keys apply
//! to every command; a `[command]` table applies to that command only and
//! wins over top-level keys. Keys may use `-` or `_`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use anyhow::{Context, Result};
use serde_json::Value;

/// Bad invocation; maps to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn normalize_key(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('-', "_")
}

pub fn env_name(key: &str) -> String {
    format!("MMKWS_{}", normalize_key(key).to_ascii_uppercase())
}

fn scalar_text(key: &str, v: &toml::Value) -> Result<String> {
    Ok(match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Boolean(b) => b.to_string(),
        _ => return Err(usage(format!("config key `{key}` must be a string, number or boolean"))),
    })
}

/// Parses a config file for `command`.
pub fn parse_config_file(text: &str, command: &str) -> Result<BTreeMap<String, String>> {
    let table: toml::Table = text.parse().map_err(|e| usage(format!("config file: {e}")))?;
    let mut out = BTreeMap::new();
    let mut section = BTreeMap::new();
    for (k, v) in &table {
        match v {
            toml::Value::Table(t) => {
                if normalize_key(k) == normalize_key(command) {
                    for (k, v) in t {
                        section.insert(normalize_key(k), scalar_text(k, v)?);
                    }
                }
            }
            _ => {
                out.insert(normalize_key(k), scalar_text(k, v)?);
            }
        }
    }
    out.extend(section);
    Ok(out)
}

/// Resolves keys through the three layers and records every resolved value.
pub struct Layers {
    file: BTreeMap<String, String>,
    env: BTreeMap<String, String>,
    flags: BTreeMap<String, String>,
    resolved: BTreeMap<String, Value>,
}

impl Layers {
    pub fn new(
        command: &str,
        config: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        sets: &[String],
    ) -> Result<Self> {
        let file = match config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                parse_config_file(&text, command)?
            }
            None => BTreeMap::new(),
        };
        let env = env
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix("MMKWS_").map(|k| (normalize_key(k), v)))
            .collect();
        let mut flags = BTreeMap::new();
        for s in sets {
            let (k, v) = s.split_once('=').ok_or_else(|| usage(format!("--set expects key=value, got `{s}`")))?;
            flags.insert(normalize_key(k), v.trim().to_string());
        }
        Ok(Self { file, env, flags, resolved: BTreeMap::new() })
    }

    fn raw(&self, key: &str) -> Option<&String> {
        self.flags.get(key).or_else(|| self.env.get(key)).or_else(|| self.file.get(key))
    }

    /// A dedicated flag beats `--set`, which beats the environment, which
    /// beats the file.
    pub fn opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: FromStr + serde::Serialize,
        T::Err: fmt::Display,
    {
        let key = normalize_key(key);
        let value = match flag {
            Some(v) => Some(v),
            None => match self.raw(&key) {
                Some(s) => Some(s.parse::<T>().map_err(|e| usage(format!("invalid value `{s}` for `{key}`: {e}")))?),
                None => None,
            },
        };
        if let Some(v) = &value {
            self.resolved.insert(key, serde_json::to_value(v)?);
        }
        Ok(value)
    }

    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + serde::Serialize,
        T::Err: fmt::Display,
    {
        match self.opt(key, flag)? {
            Some(v) => Ok(v),
            None => {
                self.resolved.insert(normalize_key(key), serde_json::to_value(&default)?);
                Ok(default)
            }
        }
    }

    pub fn require<T>(&mut self, key: &str, flag: Option<T>) -> Result<T>
    where
        T: FromStr + serde::Serialize,
        T::Err: fmt::Display,
    {
        self.opt(key, flag)?.ok_or_else(|| {
            usage(format!("missing required `{key}` (flag --{}, env {})", key.replace('_', "-"), env_name(key)))
        })
    }

    /// Resolved values minus the named keys (paths and other values that do
    /// not change results).
    pub fn record(&self, exclude: &[&str]) -> Value {
        let map: serde_json::Map<String, Value> = self
            .resolved
            .iter()
            .filter(|(k, _)| !exclude.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Value::Object(map)
    }

    /// Prints the resolved configuration to stderr.
    pub fn echo(&self, command: &str) {
        for (k, v) in &self.resolved {
            eprintln!("[{command}] {k} = {v}");
        }
    }
}
