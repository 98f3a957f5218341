//! Plain-text `key = value` maps used for config files and config echoes.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KvError {
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("key `{key}`: cannot parse `{value}`")]
    Parse { key: String, value: String },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown key `{0}`")]
    Unknown(String),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(KvError::Syntax { line: i + 1 });
            };
            let k = k.trim();
            if k.is_empty() {
                return Err(KvError::Syntax { line: i + 1 });
            }
            entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn set_raw(&mut self, key: &str, value: String) {
        self.entries.insert(key.to_string(), value);
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, KvError> {
        let v = self.entries.get(key).ok_or_else(|| KvError::Missing(key.to_string()))?;
        v.parse().map_err(|_| KvError::Parse { key: key.to_string(), value: v.clone() })
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, KvError> {
        if self.entries.contains_key(key) {
            self.get(key)
        } else {
            Ok(default)
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Later entries win.
    pub fn merge(&mut self, other: &KvMap) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    /// Canonical text: sorted keys, one `key = value` per line.
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_canonicalise() {
        let kv = KvMap::parse("# comment\nb = 2\n a=1.5  # trailing\n\n").unwrap();
        assert_eq!(kv.get::<f64>("a").unwrap(), 1.5);
        assert_eq!(kv.get::<u32>("b").unwrap(), 2);
        assert_eq!(kv.to_text(), "a = 1.5\nb = 2\n");
        assert_eq!(KvMap::parse(&kv.to_text()).unwrap(), kv);
        assert_eq!(kv.get::<u32>("c"), Err(KvError::Missing("c".into())));
        assert!(matches!(kv.get::<u32>("a"), Err(KvError::Parse { .. })));
        assert_eq!(KvMap::parse("novalue"), Err(KvError::Syntax { line: 1 }));
    }

    #[test]
    fn floats_round_trip_exactly() {
        let mut kv = KvMap::new();
        let x: f64 = 0.1 + 0.2;
        kv.set("x", x);
        let back = KvMap::parse(&kv.to_text()).unwrap();
        assert_eq!(back.get::<f64>("x").unwrap().to_bits(), x.to_bits());
    }
}
