//! Plain-text key-value run configuration.
//!
//! One `key = value` pair per line, `#` starts a comment. CLI flags override
//! file values; file values override built-in defaults.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValueConfig {
    map: BTreeMap<String, String>,
}

impl KeyValueConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_contents(&text)
    }

    pub fn from_str_contents(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {} has no `=`: `{raw}`", lineno + 1))
            })?;
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(KeyValueConfig { map })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Typed lookup; `None` when the key is absent, an error when present
    /// but unparsable.
    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::Config(format!("config key `{key}` has invalid value `{raw}`"))),
        }
    }
}

/// Flag > config file > default.
pub fn resolve<T: std::str::FromStr + Clone>(
    flag: Option<T>,
    file: Option<&KeyValueConfig>,
    key: &str,
    default: T,
) -> Result<T> {
    if let Some(v) = flag {
        return Ok(v);
    }
    if let Some(cfg) = file {
        if let Some(v) = cfg.parse::<T>(key)? {
            return Ok(v);
        }
    }
    Ok(default)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pairs_and_comments() {
        let cfg = KeyValueConfig::from_str_contents("# run\nseed = 7\n preset=cross # inline\n\n").unwrap();
        assert_eq!(cfg.get("seed"), Some("7"));
        assert_eq!(cfg.get("preset"), Some("cross"));
        assert_eq!(cfg.parse::<u64>("seed").unwrap(), Some(7));
        assert_eq!(cfg.parse::<u64>("missing").unwrap(), None);
        assert!(cfg.parse::<u64>("preset").is_err());
    }

    #[test]
    fn malformed_line_is_an_error() {
        assert!(KeyValueConfig::from_str_contents("just words\n").is_err());
    }

    #[test]
    fn flags_override_file_values() {
        let cfg = KeyValueConfig::from_str_contents("epochs = 3\n").unwrap();
        assert_eq!(resolve(Some(9usize), Some(&cfg), "epochs", 1).unwrap(), 9);
        assert_eq!(resolve(None, Some(&cfg), "epochs", 1).unwrap(), 3);
        assert_eq!(resolve::<usize>(None, Some(&cfg), "batch", 8).unwrap(), 8);
        assert_eq!(resolve::<usize>(None, None, "batch", 8).unwrap(), 8);
    }
}
