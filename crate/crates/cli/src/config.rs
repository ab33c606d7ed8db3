//! Flat `key=value` configuration files. Keys are long flag names with
//! dashes or underscores; command-line flags take precedence.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{CliError, Result};

/// Every key a config file may set.
pub const KNOWN_KEYS: &[&str] = &[
    "manifest",
    "out",
    "seed",
    "workers",
    "vad_frame_len",
    "vad_hop",
    "vad_percentile",
    "vad_margin_db",
    "vad_min_region",
    "vad_merge_gap",
    "target_len",
    "approach",
    "epochs",
    "learning_rate",
    "batch_size",
    "mixup",
    "mixup_alpha",
    "time_wrap",
    "top_k",
    "eval_batch",
    "checkpoint",
    "history",
    "split",
    "fusion",
    "predictions",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value, got {raw:?}", n + 1)))?;
            let key = k.trim().replace('-', "_");
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(CliError::Usage(format!("config line {}: unknown key {key:?}", n + 1)));
            }
            if values.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(CliError::Usage(format!("config line {}: {key} set twice", n + 1)));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| CliError::Usage(format!("config {key}={v}: {e}")))
            })
            .transpose()
    }

    /// The flag value if given, else the config value.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects() {
        let c = Config::parse("# comment\nseed = 7\nlearning-rate=0.001\n\n").unwrap();
        assert_eq!(c.get::<u64>("seed").unwrap(), Some(7));
        assert_eq!(c.get::<f64>("learning_rate").unwrap(), Some(0.001));
        assert_eq!(c.pick(Some(3u64), "seed").unwrap(), Some(3));
        assert_eq!(c.pick::<usize>(None, "epochs").unwrap(), None);
        assert!(c.get::<u64>("learning_rate").is_err());
        assert!(Config::parse("colour=blue").is_err());
        assert!(Config::parse("seed").is_err());
        assert!(Config::parse("seed=1\nseed=2").is_err());
    }
}
