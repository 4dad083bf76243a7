//! Persistence: checkpoints, key-value config snapshots and experiment files.

pub mod checkpoint;
pub mod experiment;

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parsed `key=value` lines.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvMap(BTreeMap<String, String>);

impl KvMap {
    pub fn get(&self, key: &str) -> Result<&str> {
        self.0
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Corrupt(format!("missing config key `{key}`")))
    }

    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::Corrupt(format!("config key `{key}` has unparsable value `{raw}`")))
    }
}

pub fn parse_kv(text: &str) -> Result<KvMap> {
    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Corrupt(format!("config line without `=`: `{line}`")))?;
        if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Corrupt(format!("duplicate config key `{k}`")));
        }
    }
    Ok(KvMap(map))
}
