//! Key-value config file merged with command-line flags.
//!
//! File format: one `key = value` per line, `#` starts a comment. Keys use the
//! long flag names; `-` and `_` are interchangeable. Flags win over the file.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "n_scenes",
    "difficulty",
    "overlap_rate",
    "width",
    "height",
    "components",
    "epochs",
    "learning_rate",
    "neg_weight",
    "neg_ratio",
    "mask_tau",
    "edge_eps",
    "batch_scenes",
    "val_fraction",
    "mode",
    "features",
    "geo_hidden",
    "layers",
    "threshold",
    "split",
];

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("config line {}: expected `key = value`, got {raw:?}", n + 1))?;
        let key = normalize(k);
        if !KNOWN_KEYS.contains(&key.as_str()) {
            bail!("config line {}: unknown key '{key}'", n + 1);
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

/// Resolves settings and records every effective value for provenance.
#[derive(Debug, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    effective: BTreeMap<String, serde_json::Value>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                parse_config(&text).with_context(|| format!("in {}", p.display()))?
            }
            None => BTreeMap::new(),
        };
        Ok(Settings { file, effective: BTreeMap::new() })
    }

    fn file_value<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.file
            .get(key)
            .map(|v| v.parse::<T>().map_err(|e| anyhow!("config key '{key}' = {v:?}: {e}")))
            .transpose()
    }

    /// Flag, else config file, else `default`.
    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: FromStr + serde::Serialize,
        T::Err: std::fmt::Display,
    {
        let value = match flag {
            Some(v) => v,
            None => self.file_value(key)?.unwrap_or(default),
        };
        self.effective.insert(key.to_string(), serde_json::to_value(&value)?);
        Ok(value)
    }

    /// Like [`Settings::get`] for optional numbers; `none` or `off` disable them.
    pub fn get_optional<T>(&mut self, key: &str, flag: Option<Option<T>>, default: Option<T>) -> Result<Option<T>>
    where
        T: FromStr + serde::Serialize + Copy,
        T::Err: std::fmt::Display,
    {
        let value = match flag {
            Some(v) => v,
            None => match self.file.get(key).map(|s| s.as_str()) {
                Some("none" | "off" | "all") => None,
                Some(_) => self.file_value(key)?,
                None => default,
            },
        };
        self.effective.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(value)
    }

    pub fn record(&mut self, key: &str, value: impl serde::Serialize) {
        self.effective.insert(key.to_string(), serde_json::to_value(value).unwrap_or_default());
    }

    pub fn effective(&self) -> serde_json::Value {
        serde_json::to_value(&self.effective).unwrap_or_default()
    }
}
