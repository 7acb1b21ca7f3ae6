//! Run configuration: a flat key/value document with dotted section keys.
//!
//! Training fields sit at the top level (`total_steps = 2000`); the other
//! sections are addressed as `backbone.*`, `loss.*`, `views.*`, `dataset.*`
//! and `eval.*`. Every key must already exist in the defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::evalsuite::EvalConfig;
use crate::synthgen::DatasetConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
    pub eval: EvalConfig,
}

fn unknown(key: &str) -> Error {
    Error::Config(format!("unknown config key `{key}`"))
}

/// Interprets a textual override against the type of the value it replaces.
fn parse_like(key: &str, current: &Value, raw: &str) -> Result<Value> {
    let raw = raw.trim();
    let bad = || Error::Config(format!("`{key}`: cannot parse `{raw}`"));
    Ok(match current {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
        Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad())?),
        Value::Number(n) if n.is_i64() => Value::from(raw.parse::<i64>().map_err(|_| bad())?),
        Value::Number(_) => Value::from(raw.parse::<f64>().map_err(|_| bad())?),
        Value::String(_) => Value::String(raw.to_string()),
        Value::Array(_) | Value::Null | Value::Object(_) => match serde_json::from_str(raw) {
            Ok(v) => v,
            // Bare lists: `checker;stripes` or `0.4;1.0`.
            Err(_) => Value::Array(
                raw.split(';')
                    .map(|item| {
                        let item = item.trim();
                        serde_json::from_str(item).unwrap_or_else(|_| Value::String(item.to_string()))
                    })
                    .collect(),
            ),
        },
    })
}

impl RunConfig {
    fn with_value(&self, key: &str, f: impl FnOnce(&Value) -> Result<Value>) -> Result<Self> {
        let mut root = serde_json::to_value(self)?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| unknown(key))?;
        }
        if slot.is_object() {
            return Err(Error::Config(format!("`{key}` is a section, not a value")));
        }
        *slot = f(slot)?;
        serde_json::from_value(root).map_err(|e| Error::Config(format!("`{key}`: {e}")))
    }

    /// Sets one dotted key from text.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        *self = self.with_value(key, |cur| parse_like(key, cur, raw))?;
        Ok(())
    }

    /// Sets one dotted key from an already typed value.
    pub fn set_value(&mut self, key: &str, value: Value) -> Result<()> {
        *self = self.with_value(key, |cur| {
            // Integers written where a float lives are fine; the reverse is not.
            Ok(match (cur, &value) {
                (Value::Number(c), Value::Number(v)) if !c.is_u64() && !c.is_i64() => Value::from(v.as_f64().unwrap()),
                _ => value.clone(),
            })
        })?;
        Ok(())
    }

    /// Applies `k=v,k=v` overrides. A piece without `=` continues the
    /// previous value, so list values may contain commas.
    pub fn apply_overrides(&mut self, list: &str) -> Result<()> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for piece in list.split(',') {
            match piece.split_once('=') {
                Some((k, v)) => pairs.push((k.trim().to_string(), v.to_string())),
                None => match pairs.last_mut() {
                    Some((_, v)) => {
                        v.push(',');
                        v.push_str(piece);
                    }
                    None if piece.trim().is_empty() => {}
                    None => return Err(Error::Config(format!("override `{piece}` is not key=value"))),
                },
            }
        }
        for (k, v) in pairs {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Parses a TOML document of `key = value` lines (dotted keys or tables).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        let mut leaves = Vec::new();
        flatten("", &toml::Value::Table(table), &mut leaves);
        let mut cfg = Self::default();
        for (key, value) in leaves {
            cfg.set_value(&key, serde_json::to_value(value)?)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Every key with its current value, one `key = value` line each.
    pub fn to_flat_string(&self) -> Result<String> {
        let v = serde_json::to_value(self)?;
        let mut lines = Vec::new();
        flatten_json("", &v, &mut lines);
        Ok(lines.join("\n") + "\n")
    }

    /// Uses one seed for data, training and evaluation.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.dataset.seed = seed;
        self.eval.seed = seed;
        self.eval.kmeans.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, toml::Value)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.clone())),
    }
}

fn flatten_json(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(o) => {
            for (k, v) in o {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_json(&key, v, out);
            }
        }
        Value::Null => {}
        other => out.push(format!("{prefix} = {other}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::Family;
    use crate::trainer::Pairing;

    #[test]
    fn overrides_reach_every_section() {
        let mut c = RunConfig::default();
        c.apply_overrides("total_steps=10,backbone.embed_dim=64,loss.lambda_c=0,pairing=single").unwrap();
        c.apply_overrides("dataset.families=checker;dots,views.global_area=[0.5,1.0],eval.kmeans.k_max=5").unwrap();
        assert_eq!(c.train.total_steps, 10);
        assert_eq!(c.train.backbone.embed_dim, 64);
        assert_eq!(c.train.loss.lambda_c, 0.0);
        assert_eq!(c.train.pairing, Pairing::Single);
        assert_eq!(c.dataset.families, vec![Family::Checker, Family::Dots]);
        assert_eq!(c.train.views.global_area, (0.5, 1.0));
        assert_eq!(c.eval.kmeans.k_max, 5);
    }

    #[test]
    fn unknown_and_malformed_keys_name_the_key() {
        let mut c = RunConfig::default();
        let e = c.set("backbone.nope", "1").unwrap_err().to_string();
        assert!(e.contains("backbone.nope"));
        let e = c.set("total_steps", "ten").unwrap_err().to_string();
        assert!(e.contains("total_steps"));
        assert!(c.set("pairing", "double").is_err());
        assert!(c.set("backbone", "1").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let text = "total_steps = 7\nbase_lr = 0.002\n[backbone]\ndepth = 2\n[dataset]\nfamilies = [\"stripes\"]\n";
        let c = RunConfig::from_toml_str(text).unwrap();
        assert_eq!((c.train.total_steps, c.train.base_lr, c.train.backbone.depth), (7, 0.002, 2));
        let flat = c.to_flat_string().unwrap();
        let back = RunConfig::from_toml_str(&flat).unwrap();
        assert_eq!(back, c);
        assert!(RunConfig::from_toml_str("bogus = 1").is_err());
    }
}
