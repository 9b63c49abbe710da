//! Flat `key = value` configuration text. Blank lines and `#` comments are
//! ignored; every expected key must be present and unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
    used: Vec<String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            let k = k.trim().to_string();
            if entries.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k}", i + 1)));
            }
        }
        Ok(KeyValues {
            entries,
            used: Vec::new(),
        })
    }

    pub fn from_pairs(pairs: &[(&str, String)]) -> Self {
        KeyValues {
            entries: pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
            used: Vec::new(),
        }
    }

    pub fn get<T>(&mut self, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        let raw = self
            .entries
            .get(key)
            .ok_or_else(|| Error::Config(format!("missing key {key}")))?;
        let v = raw
            .parse()
            .map_err(|e| Error::Config(format!("key {key}: cannot parse {raw:?}: {e}")))?;
        self.used.push(key.to_string());
        Ok(v)
    }

    pub fn get_str(&mut self, key: &str) -> Result<String> {
        self.get(key)
    }

    /// Fails on any key that no `get` call consumed.
    pub fn finish(self) -> Result<()> {
        let unknown: Vec<_> = self
            .entries
            .keys()
            .filter(|k| !self.used.contains(k))
            .cloned()
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_validate() {
        let mut kv = KeyValues::parse("# c\na = 3\nb=hello # trailing\n\n").unwrap();
        assert_eq!(kv.get::<u32>("a").unwrap(), 3);
        assert_eq!(kv.get_str("b").unwrap(), "hello");
        kv.finish().unwrap();

        let mut kv = KeyValues::parse("a = 3\nz = 1").unwrap();
        kv.get::<u32>("a").unwrap();
        let err = kv.finish().unwrap_err().to_string();
        assert!(err.contains("z"));

        let mut kv = KeyValues::parse("a = x").unwrap();
        assert!(kv.get::<f64>("a").is_err());
        assert!(kv.get::<f64>("missing").unwrap_err().to_string().contains("missing"));
        assert!(KeyValues::parse("a = 1\na = 2").is_err());
        assert!(KeyValues::parse("novalue").is_err());
    }
}
