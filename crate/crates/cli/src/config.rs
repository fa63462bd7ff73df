//! Flat `key=value` run configuration. Flags win over file values, which
//! win over built-in defaults.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::ConfigError;

/// Every key a config file may set; each is the long name of a flag.
pub const KNOWN_KEYS: &[&str] = &[
    "attrs",
    "base-url",
    "batch-size",
    "cache",
    "checkpoint",
    "data",
    "depth",
    "depth-grid",
    "dimg",
    "dropout",
    "dshared",
    "dword",
    "embeddings",
    "epochs",
    "feasibility",
    "heads",
    "heads-grid",
    "holdout",
    "in",
    "lr",
    "max-in-flight",
    "noise",
    "objs",
    "out",
    "residual",
    "samples",
    "seed",
    "source",
    "split",
    "temperature",
    "threshold",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    /// Parses `key=value` lines; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::new(format!("line {}: expected key=value, found {line:?}", i + 1)))?;
            let key = key.trim();
            Self::check_key(key).map_err(|e| ConfigError::new(format!("line {}: {e}", i + 1)))?;
            if values.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(ConfigError::new(format!("line {}: duplicate key {key:?}", i + 1)));
            }
        }
        Ok(ConfigFile { values })
    }

    /// Reads a `key=value` file, or the resolved config of a run manifest
    /// (a `.json` file) so a recorded run can be repeated.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::Error::new(e).context(format!("--config {}", path.display())))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            let manifest: crate::manifest::RunManifest = serde_json::from_str(&text)
                .map_err(|e| anyhow::Error::new(e).context(format!("--config {}", path.display())))?;
            for key in manifest.config.keys() {
                Self::check_key(key)?;
            }
            ConfigFile {
                values: manifest.config,
            }
        } else {
            Self::parse(&text)?
        };
        Ok(parsed)
    }

    fn check_key(key: &str) -> Result<(), ConfigError> {
        if KNOWN_KEYS.contains(&key) {
            Ok(())
        } else {
            Err(ConfigError::new(format!("unknown config key {key:?}")))
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }
}

/// Resolves settings and records each resolved value for the manifest.
#[derive(Debug, Default)]
pub struct Resolver {
    file: ConfigFile,
    resolved: BTreeMap<String, String>,
}

impl Resolver {
    pub fn new(file: ConfigFile) -> Self {
        Resolver {
            file,
            resolved: BTreeMap::new(),
        }
    }

    fn file_value<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: Display,
    {
        self.file
            .get(key)
            .map(|s| {
                s.parse::<T>()
                    .map_err(|e| ConfigError::new(format!("config key {key}: bad value {s:?}: {e}")))
            })
            .transpose()
    }

    pub fn optional<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, ConfigError>
    where
        T::Err: Display,
    {
        let value = match flag {
            Some(v) => Some(v),
            None => self.file_value(key)?,
        };
        if let Some(v) = &value {
            self.resolved.insert(key.to_string(), v.to_string());
        }
        Ok(value)
    }

    pub fn value<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, ConfigError>
    where
        T::Err: Display,
    {
        Ok(self.optional(key, flag)?.unwrap_or_else(|| {
            self.resolved.insert(key.to_string(), default.to_string());
            default
        }))
    }

    /// Like [`optional`](Self::optional) but fails with a message naming
    /// the flag when the value is absent.
    pub fn required<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, what: &str) -> Result<T, ConfigError>
    where
        T::Err: Display,
    {
        self.optional(key, flag)?.ok_or_else(|| {
            ConfigError::new(format!("missing --{key} <{what}> (or `{key}=` in the --config file)"))
        })
    }

    /// Comma-separated list. An empty `flag` falls back to the file.
    pub fn list<T: FromStr + Display>(&mut self, key: &str, flag: Vec<T>) -> Result<Option<Vec<T>>, ConfigError>
    where
        T::Err: Display,
    {
        let values = if !flag.is_empty() {
            flag
        } else {
            match self.file.get(key) {
                None => return Ok(None),
                Some(s) => s
                    .split(',')
                    .map(str::trim)
                    .filter(|p| !p.is_empty())
                    .map(|p| {
                        p.parse::<T>()
                            .map_err(|e| ConfigError::new(format!("config key {key}: bad value {p:?}: {e}")))
                    })
                    .collect::<Result<_, _>>()?,
            }
        };
        let joined = values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        self.resolved.insert(key.to_string(), joined);
        Ok(Some(values))
    }

    pub fn optional_path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>, ConfigError> {
        Ok(self
            .optional(key, flag.map(|p| p.display().to_string()))?
            .map(PathBuf::from))
    }

    pub fn required_path(&mut self, key: &str, flag: Option<PathBuf>, what: &str) -> Result<PathBuf, ConfigError> {
        Ok(PathBuf::from(
            self.required(key, flag.map(|p| p.display().to_string()), what)?,
        ))
    }

    pub fn path_list(&mut self, key: &str, flag: Vec<PathBuf>) -> Result<Option<Vec<PathBuf>>, ConfigError> {
        let flag = flag.iter().map(|p| p.display().to_string()).collect();
        Ok(self
            .list::<String>(key, flag)?
            .map(|v| v.into_iter().map(PathBuf::from).collect()))
    }

    pub fn resolved(&self) -> &BTreeMap<String, String> {
        &self.resolved
    }

    pub fn into_resolved(self) -> BTreeMap<String, String> {
        self.resolved
    }
}
