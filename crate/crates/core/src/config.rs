//! Plain-text `key=value` configuration.
//!
//! One entry per line; `#` starts a comment; blank lines are ignored. Every
//! key has a default in the owning stage config.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Result, SegError};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SegError::Config(format!("line {}: expected key=value, got '{line}'", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(SegError::Config(format!("line {}: empty key", n + 1)));
            }
            entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(KvConfig { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        KvConfig::parse(&fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| SegError::Config(format!("invalid value '{v}' for key '{key}'"))),
        }
    }

    /// Overwrites `slot` when `key` is present.
    pub fn apply<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    /// Fails on the first key not in `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        match self.keys().find(|k| !known.contains(k)) {
            Some(k) => Err(SegError::Config(format!("unknown config key '{k}'"))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let c = KvConfig::parse("# header\n\n gmm_k = 3 \nlambda=50.5 # trailing\n").unwrap();
        assert_eq!(c.get::<usize>("gmm_k").unwrap(), Some(3));
        assert_eq!(c.get::<f64>("lambda").unwrap(), Some(50.5));
        assert_eq!(c.get::<f64>("missing").unwrap(), None);
    }

    #[test]
    fn rejects_malformed() {
        assert!(KvConfig::parse("novalue\n").is_err());
        assert!(KvConfig::parse("=3\n").is_err());
        let c = KvConfig::parse("k=abc").unwrap();
        assert!(c.get::<u32>("k").is_err());
        assert!(c.check_known(&["other"]).is_err());
        assert!(c.check_known(&["k"]).is_ok());
    }
}
