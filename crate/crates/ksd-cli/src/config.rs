//! Flat key-value experiment configs.
//!
//! The on-disk format is one `key = value` pair per line, with dotted keys
//! for grouping (`kernel.bandwidth = 0.5`), `#` comments, and blank lines
//! ignored. There is no nesting and no quoting; values run to the end of the
//! line. The flatness keeps configs diff-friendly and makes the schema easy
//! to document.
//!
//! Every read is tracked so that [`Config::finish`] can reject keys the
//! experiment never consumed. A typo like `kernel.bandwith` fails loudly
//! instead of silently running with a default.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// A config file error with enough context to fix the line.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

type ConfigResult<T> = std::result::Result<T, ConfigError>;

/// Parsed config: an ordered key-value map plus a used-key ledger.
#[derive(Debug)]
pub struct Config {
    entries: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && !key.starts_with('.')
        && !key.ends_with('.')
        && !key.contains("..")
        && key
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '.')
}

impl Config {
    pub fn parse(text: &str) -> ConfigResult<Config> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = idx + 1;
            let (key, value) = line.split_once('=').ok_or_else(|| {
                ConfigError(format!("line {lineno}: expected `key = value`, got `{line}`"))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !valid_key(key) {
                return Err(ConfigError(format!(
                    "line {lineno}: invalid key `{key}` (lowercase, digits, `_`, `.`)"
                )));
            }
            if value.is_empty() {
                return Err(ConfigError(format!("line {lineno}: key `{key}` has no value")));
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(ConfigError(format!("line {lineno}: duplicate key `{key}`")));
            }
        }
        Ok(Config {
            entries,
            used: RefCell::new(BTreeSet::new()),
        })
    }

    pub fn from_path(path: &Path) -> ConfigResult<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Config::parse(&text)
    }

    /// Raw lookup; marks the key as consumed.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().insert(key.to_string());
        self.entries.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> ConfigResult<&str> {
        self.get(key)
            .ok_or_else(|| ConfigError(format!("missing required key `{key}`")))
    }

    fn parse_value<T: FromStr>(&self, key: &str, raw: &str, what: &str) -> ConfigResult<T> {
        raw.parse()
            .map_err(|_| ConfigError(format!("key `{key}`: expected {what}, got `{raw}`")))
    }

    pub fn f64_or(&self, key: &str, default: f64) -> ConfigResult<f64> {
        match self.get(key) {
            Some(raw) => self.parse_value(key, raw, "a number"),
            None => Ok(default),
        }
    }

    pub fn require_f64(&self, key: &str) -> ConfigResult<f64> {
        let raw = self.require(key)?;
        self.parse_value(key, raw, "a number")
    }

    pub fn usize_or(&self, key: &str, default: usize) -> ConfigResult<usize> {
        match self.get(key) {
            Some(raw) => self.parse_value(key, raw, "a nonnegative integer"),
            None => Ok(default),
        }
    }

    pub fn require_usize(&self, key: &str) -> ConfigResult<usize> {
        let raw = self.require(key)?;
        self.parse_value(key, raw, "a nonnegative integer")
    }

    pub fn u64_or(&self, key: &str, default: u64) -> ConfigResult<u64> {
        match self.get(key) {
            Some(raw) => self.parse_value(key, raw, "a 64-bit seed"),
            None => Ok(default),
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> ConfigResult<bool> {
        match self.get(key) {
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(raw) => Err(ConfigError(format!(
                "key `{key}`: expected true or false, got `{raw}`"
            ))),
            None => Ok(default),
        }
    }

    /// Comma-separated list of floats, e.g. `flow.step_sizes = 0.1, 0.5, 1`.
    pub fn f64_list(&self, key: &str) -> ConfigResult<Option<Vec<f64>>> {
        let Some(raw) = self.get(key) else {
            return Ok(None);
        };
        let raw = raw.to_string();
        let mut out = Vec::new();
        for part in raw.split(',') {
            out.push(self.parse_value(key, part.trim(), "a number")?);
        }
        Ok(Some(out))
    }

    /// Comma-separated list of words, e.g. `schemes = ksd_lbfgs, svgd`.
    pub fn word_list(&self, key: &str) -> ConfigResult<Option<Vec<String>>> {
        let Some(raw) = self.get(key) else {
            return Ok(None);
        };
        Ok(Some(
            raw.split(',')
                .map(|w| w.trim().to_string())
                .filter(|w| !w.is_empty())
                .collect(),
        ))
    }

    /// Errors if any key in the file was never consumed by the experiment.
    pub fn finish(&self) -> ConfigResult<()> {
        let used = self.used.borrow();
        let unknown: Vec<&str> = self
            .entries
            .keys()
            .filter(|k| !used.contains(*k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(ConfigError(format!(
                "keys not recognized by this experiment: {}",
                unknown.join(", ")
            )))
        }
    }
}
