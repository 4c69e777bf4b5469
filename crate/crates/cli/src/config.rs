//! Flat `key = value` configuration.
//!
//! Blank lines and lines starting with `#` are ignored; later assignments of
//! the same key win.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

/// Configuration problems exit with status 2, everything else with 1.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(anyhow::Error),
}

impl CliError {
    /// Core validation errors name the offending field already.
    pub fn from_core(e: wppg_core::Error) -> Self {
        Self::Config(e.to_string())
    }
}

#[derive(Clone, Debug, Default)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let mut kv = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("{origin}:{}: expected key = value, got {line:?}", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(CliError::Config(format!("{origin}:{}: empty key", n + 1)));
            }
            kv.insert(k, v.trim());
        }
        Ok(kv)
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("config: cannot read {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn insert(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), CliError> {
        for k in self.entries.keys() {
            if !allowed.contains(&k.as_str()) {
                return Err(CliError::Config(format!("{k}: unknown key for this command")));
            }
        }
        Ok(())
    }

    /// Echo files record their subcommand; reject one meant for another.
    pub fn expect_command(&self, name: &str) -> Result<(), CliError> {
        match self.get("command") {
            Some(c) if c != name => Err(CliError::Config(format!("command: file is for {c:?}, not {name:?}"))),
            _ => Ok(()),
        }
    }

    pub fn parse_req<T>(&self, key: &str) -> Result<T, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        let v = self.get(key).ok_or_else(|| CliError::Config(format!("{key}: required")))?;
        v.parse().map_err(|e| CliError::Config(format!("{key}: cannot parse {v:?}: {e}")))
    }

    pub fn parse_or<T>(&self, key: &str, default: T) -> Result<T, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.get(key) {
            Some(_) => self.parse_req(key),
            None => Ok(default),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_blank_lines_and_overrides() {
        let kv = KvMap::parse("# c\n\ntau = 0.5\n eta=2 \ntau = 0.25\n", "t").unwrap();
        assert_eq!(kv.get("tau"), Some("0.25"));
        assert_eq!(kv.get("eta"), Some("2"));
        assert_eq!(kv.parse_or("steps", 7usize).unwrap(), 7);
    }

    #[test]
    fn malformed_line_names_location() {
        let Err(CliError::Config(msg)) = KvMap::parse("tau 0.5\n", "f.cfg") else {
            panic!("expected config error");
        };
        assert!(msg.contains("f.cfg:1"));
    }

    #[test]
    fn parse_errors_name_the_key() {
        let kv = KvMap::parse("steps = many\n", "t").unwrap();
        let Err(CliError::Config(msg)) = kv.parse_req::<usize>("steps") else {
            panic!("expected config error");
        };
        assert!(msg.starts_with("steps:"));
        assert!(kv.check_keys(&["tau"]).is_err());
    }
}
