//! Flat `key = value` configuration with dotted section keys.
//!
//! ```text
//! # comment
//! seed = 3
//! lowshot.tau = 0.5
//! ```
//!
//! Command-line `--key value` pairs are applied on top of the file, so
//! flags win.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("{origin}: {msg}")]
    Syntax { origin: String, msg: String },
    #[error("{key}: {msg}")]
    Field { key: String, msg: String },
    #[error("unknown key {0}")]
    UnknownKey(String),
    #[error("cannot read {path}: {msg}")]
    Io { path: PathBuf, msg: String },
}

impl ConfigError {
    pub fn field(key: &str, msg: impl Into<String>) -> Self {
        ConfigError::Field { key: key.to_string(), msg: msg.into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut map = ConfigMap::default();
        for (n, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                origin: format!("{origin}:{}", n + 1),
                msg: format!("expected key = value, got {line:?}"),
            })?;
            let key = key.trim();
            if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.') {
                return Err(ConfigError::Syntax { origin: format!("{origin}:{}", n + 1), msg: format!("bad key {key:?}") });
            }
            map.entries.insert(key.to_string(), value.trim().to_string());
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.to_path_buf(), msg: e.to_string() })?;
        ConfigMap::parse(&text, &path.display().to_string())
    }

    /// Builds the map from command-line arguments: `--config <path>` loads a
    /// file first, and every other `--key value` overrides it. A flag
    /// followed by another flag or by nothing is set to `true`.
    pub fn from_args(args: &[String]) -> Result<Self, ConfigError> {
        let mut pairs = Vec::new();
        let mut file = None;
        let mut i = 0;
        while i < args.len() {
            let Some(key) = args[i].strip_prefix("--") else {
                return Err(ConfigError::Syntax { origin: "command line".into(), msg: format!("unexpected argument {:?}", args[i]) });
            };
            let (key, value) = match key.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => match args.get(i + 1) {
                    Some(v) if !v.starts_with("--") => {
                        i += 1;
                        (key.to_string(), v.clone())
                    }
                    _ => (key.to_string(), "true".to_string()),
                },
            };
            i += 1;
            let key = key.replace('-', "_");
            if key == "config" {
                file = Some(PathBuf::from(value));
            } else {
                pairs.push((key, value));
            }
        }
        let mut map = match file {
            Some(p) => ConfigMap::load(&p)?,
            None => ConfigMap::default(),
        };
        for (k, v) in pairs {
            map.entries.insert(k, v);
        }
        Ok(map)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Parses `key` if present.
    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| ConfigError::field(key, format!("cannot parse {v:?}: {e}"))),
        }
    }

    pub fn get_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn get_list<T: std::str::FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|e| ConfigError::field(key, format!("cannot parse {s:?}: {e}"))))
                .collect::<Result<Vec<T>, _>>()
                .map(Some),
        }
    }

    /// Fails on the first key not in `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<(), ConfigError> {
        match self.keys().find(|k| !known.contains(k)) {
            Some(k) => Err(ConfigError::UnknownKey(k.to_string())),
            None => Ok(()),
        }
    }
}
