//! Flat `key = value` config files: one key per line, blank lines ignored.
//! A `#` at the start of a line or after whitespace starts a comment. Relative paths resolve against the
//! directory holding the config file.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde_json::{Map, Value};

use crate::error::CliError;

fn strip_comment(line: &str) -> &str {
    let mut prev_space = true;
    for (i, ch) in line.char_indices() {
        if ch == '#' && prev_space {
            return &line[..i];
        }
        prev_space = ch.is_whitespace();
    }
    line
}

#[derive(Clone, Debug)]
pub struct Config {
    source: String,
    base_dir: PathBuf,
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &path.display().to_string(), base_dir)
    }

    pub fn parse(text: &str, source: &str, base_dir: PathBuf) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!("{source}:{}: expected key = value", i + 1)));
            };
            let key = key.trim();
            if key.is_empty() {
                return Err(CliError::Config(format!("{source}:{}: empty key", i + 1)));
            }
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(CliError::Config(format!("{source}:{}: duplicate key {key:?}", i + 1)));
            }
        }
        Ok(Self { source: source.to_string(), base_dir, entries })
    }

    /// Rejects every key not in `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), CliError> {
        let unknown: Vec<&str> = self.entries.keys().map(String::as_str).filter(|k| !allowed.contains(k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(format!("{}: unknown key(s): {}", self.source, unknown.join(", "))))
        }
    }

    pub fn has(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str, CliError> {
        self.str(key)
            .ok_or_else(|| CliError::Config(format!("{}: missing required key {key:?}", self.source)))
    }

    pub fn parse_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        self.str(key)
            .map(|v| {
                v.parse()
                    .map_err(|e| CliError::Config(format!("{}: key {key:?}: cannot parse {v:?}: {e}", self.source)))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        Ok(self.parse_opt(key)?.unwrap_or(default))
    }

    pub fn parse_required<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        self.require(key)?;
        Ok(self.parse_opt(key)?.expect("present"))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, CliError>
    where
        T::Err: Display,
    {
        self.str(key)
            .map(|v| {
                v.split(',')
                    .map(|item| {
                        item.trim().parse().map_err(|e| {
                            CliError::Config(format!("{}: key {key:?}: cannot parse {item:?}: {e}", self.source))
                        })
                    })
                    .collect()
            })
            .transpose()
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.str(key).map(|v| self.base_dir.join(v))
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf, CliError> {
        self.require(key)?;
        Ok(self.path(key).expect("present"))
    }

    pub fn invalid(&self, key: &str, reason: impl Display) -> CliError {
        CliError::Config(format!("{}: key {key:?}: {reason}", self.source))
    }

    /// Every entry as given, for reproducing a run.
    pub fn echo(&self) -> Value {
        Value::Object(self.entries.iter().map(|(k, v)| (k.clone(), Value::String(v.clone()))).collect::<Map<_, _>>())
    }
}
