//! `key = value` settings files. Flags win over file values, file values
//! win over built-in defaults.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "concepts",
    "noise",
    "distractors",
    "test_fraction",
    "d_model",
    "heads",
    "layers",
    "max_seq",
    "stage",
    "k",
    "lambda",
    "tau0",
    "alpha_mode",
    "distill_variant",
    "distill_tau",
    "mac_mode",
    "shards",
    "batch",
    "epochs",
    "lr",
];

#[derive(Debug, Default, Clone)]
pub struct Settings {
    values: BTreeMap<String, (usize, String)>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {line_no}: expected `key = value`"))?;
            let key = key.trim().replace('-', "_");
            if !KNOWN_KEYS.contains(&key.as_str()) {
                bail!("line {line_no}: unknown key `{key}`");
            }
            let value = value.trim();
            if value.is_empty() {
                bail!("line {line_no}: `{key}` has no value");
            }
            if values.insert(key.clone(), (line_no, value.to_string())).is_some() {
                bail!("line {line_no}: `{key}` set twice");
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading settings {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("settings {}", path.display()))
    }

    pub fn get<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        debug_assert!(KNOWN_KEYS.contains(&key), "unregistered key {key}");
        match self.values.get(key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|e| anyhow!("settings line {line}: bad `{key}` value {v:?}: {e}")),
        }
    }

    /// `flag`, else the file value, else `default`.
    pub fn pick<T>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        match flag {
            Some(v) => Ok(v),
            None => Ok(self.get(key)?.unwrap_or(default)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let s = Settings::parse("# model\nd_model = 32  # wide\n\nlambda=0.5\n").unwrap();
        assert_eq!(s.get::<usize>("d_model").unwrap(), Some(32));
        assert_eq!(s.pick(None, "lambda", 0.2).unwrap(), 0.5);
        assert_eq!(s.pick(Some(0.7), "lambda", 0.2).unwrap(), 0.7);
        assert_eq!(s.pick(None, "seed", 9u64).unwrap(), 9);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(Settings::parse("colour = red").is_err());
        assert!(Settings::parse("seed 4").is_err());
        assert!(Settings::parse("seed = 1\nseed = 2").is_err());
        let s = Settings::parse("seed = x").unwrap();
        assert!(s.get::<u64>("seed").is_err());
    }
}
