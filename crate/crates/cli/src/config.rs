//! Layered settings: defaults, then a `key = value` file, then flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Reads `key = value` lines; `#` starts a comment.
pub fn read_kv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("{}:{}: expected key = value, got {line:?}", path.display(), n + 1);
        };
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

/// A value written as text: JSON when it parses, a plain string otherwise.
fn parse_value(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

struct Entry {
    key: &'static str,
    /// Element of an array field, when only one end of a range is given.
    index: Option<usize>,
    value: Value,
    /// Ignored when the settings have no such key.
    optional: bool,
}

/// Flag values that were actually given on the command line.
#[derive(Default)]
pub struct Overrides {
    entries: Vec<Entry>,
}

impl Overrides {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with<T: Serialize>(self, key: &'static str, value: Option<T>) -> Self {
        self.push(key, None, value, false)
    }

    /// Like [`Overrides::with`], skipped for settings without `key`.
    pub fn with_optional<T: Serialize>(self, key: &'static str, value: Option<T>) -> Self {
        self.push(key, None, value, true)
    }

    /// Sets the two ends of a `[lo, hi]` field independently.
    pub fn range(self, key: &'static str, lo: Option<f64>, hi: Option<f64>) -> Self {
        self.push(key, Some(0), lo, false).push(key, Some(1), hi, false)
    }

    fn push<T: Serialize>(mut self, key: &'static str, index: Option<usize>, value: Option<T>, optional: bool) -> Self {
        if let Some(v) = value {
            let value = serde_json::to_value(v).expect("flag values serialize");
            self.entries.push(Entry { key, index, value, optional });
        }
        self
    }
}

/// Applies the file pairs and then the flags on top of `defaults`.
pub fn resolve<T: Serialize + DeserializeOwned>(defaults: &T, file: &[(String, String)], flags: &Overrides) -> Result<T> {
    let Value::Object(mut map) = serde_json::to_value(defaults)? else {
        bail!("settings must serialize to an object");
    };
    for (k, v) in file {
        let Some(slot) = map.get_mut(k) else {
            bail!("unknown config key {k:?}; expected one of {}", keys(&map));
        };
        *slot = parse_value(v);
    }
    for e in &flags.entries {
        let Some(slot) = map.get_mut(e.key) else {
            if e.optional {
                continue;
            }
            bail!("no setting named {:?}", e.key);
        };
        match e.index {
            None => *slot = e.value.clone(),
            Some(i) => match slot.as_array_mut().and_then(|a| a.get_mut(i)) {
                Some(item) => *item = e.value.clone(),
                None => bail!("setting {:?} has no element {i}", e.key),
            },
        }
    }
    serde_json::from_value(Value::Object(map)).context("invalid settings")
}

fn keys(map: &Map<String, Value>) -> String {
    map.keys().cloned().collect::<Vec<_>>().join(", ")
}
