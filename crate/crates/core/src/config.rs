//! Line-oriented `key = value` configuration with `#` comments, and a
//! resolver that layers command-line overrides on top of a file.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parses `key = value` lines. Blank lines and text after `#` are ignored;
/// repeated keys are rejected.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || k.contains(char::is_whitespace) {
            return Err(Error::Config(format!("line {}: invalid key `{k}`", n + 1)));
        }
        if out.iter().any(|(e, _)| e == k) {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Resolved settings: overrides beat file values, which beat defaults. Every
/// value that was looked up is remembered for the run manifest.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    overrides: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

impl Settings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Ok(Self {
            file: parse_config(text)?.into_iter().collect(),
            ..Self::default()
        })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Registers a command-line value; `None` leaves the key alone.
    pub fn set_override(&mut self, key: &str, value: Option<impl ToString>) {
        if let Some(v) = value {
            self.overrides.insert(key.to_string(), v.to_string());
        }
    }

    fn lookup(&self, key: &str) -> Option<&String> {
        self.overrides.get(key).or_else(|| self.file.get(key))
    }

    pub fn get<T>(&mut self, key: &str, default: T) -> Result<T>
    where
        T: FromStr + ToString,
    {
        let value = match self.lookup(key) {
            Some(raw) => raw
                .parse::<T>()
                .map_err(|_| Error::Config(format!("invalid value `{raw}` for `{key}`")))?,
            None => default,
        };
        self.resolved.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    /// Like [`Settings::get`] for keys without a default.
    pub fn require<T: FromStr + ToString>(&mut self, key: &str) -> Result<T> {
        let raw = self
            .lookup(key)
            .ok_or_else(|| Error::Config(format!("missing required setting `{key}`")))?
            .clone();
        let value = raw
            .parse::<T>()
            .map_err(|_| Error::Config(format!("invalid value `{raw}` for `{key}`")))?;
        self.resolved.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    /// Keys present in the file or overrides that were never looked up.
    pub fn unused(&self) -> Vec<String> {
        self.file
            .keys()
            .chain(self.overrides.keys())
            .filter(|k| !self.resolved.contains_key(*k))
            .cloned()
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Every value read so far, sorted by key.
    pub fn resolved(&self) -> Vec<(String, String)> {
        self.resolved.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    /// The resolved values in config-file syntax.
    pub fn to_text(&self) -> String {
        self.resolved.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let kv = parse_config("# header\n\nk = 7 # kernel\nlevels=3\nname = a b\n").unwrap();
        assert_eq!(
            kv,
            vec![
                ("k".to_string(), "7".to_string()),
                ("levels".to_string(), "3".to_string()),
                ("name".to_string(), "a b".to_string())
            ]
        );
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(parse_config("just words").is_err());
        assert!(parse_config("= 3").is_err());
        assert!(parse_config("a b = 3").is_err());
        assert!(parse_config("k = 1\nk = 2").is_err());
    }

    #[test]
    fn overrides_beat_file_and_defaults() {
        let mut s = Settings::from_text("k = 5\nlevels = 2\n").unwrap();
        s.set_override("k", Some(9));
        s.set_override("levels", None::<usize>);
        assert_eq!(s.get::<usize>("k", 7).unwrap(), 9);
        assert_eq!(s.get::<usize>("levels", 3).unwrap(), 2);
        assert_eq!(s.get::<f64>("lr", 0.5).unwrap(), 0.5);
        assert!(s.get::<usize>("missing", 1).is_ok());
        assert_eq!(s.to_text(), "k = 9\nlevels = 2\nlr = 0.5\nmissing = 1\n");
        let mut bad = Settings::from_text("k = seven").unwrap();
        assert!(bad.get::<usize>("k", 7).is_err());
        assert!(bad.require::<usize>("nothing").is_err());
    }

    #[test]
    fn reports_unused_keys() {
        let mut s = Settings::from_text("k = 5\ntypo = 1\n").unwrap();
        s.get::<usize>("k", 7).unwrap();
        assert_eq!(s.unused(), vec!["typo".to_string()]);
    }
}
