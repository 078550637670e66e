//! `key=value` config files and flag/env/file/default resolution.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use despeckle::{Error, Result};

/// Keys with this prefix describe a past run and are ignored when a manifest is
/// replayed as a config file.
pub const RUN_PREFIX: &str = "run.";

#[derive(Clone, Debug, Default)]
pub struct ConfigFile {
    entries: BTreeMap<String, String>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            entries.insert(normalize(k), v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }
}

/// A value that can come from a flag or a config file and be written back out.
pub trait Setting: FromStr {
    fn render(&self) -> String;
}

macro_rules! display_setting {
    ($($t:ty),*) => {$(
        impl Setting for $t {
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

display_setting!(u64, usize, f64, String);

impl Setting for PathBuf {
    fn render(&self) -> String {
        self.display().to_string()
    }
}

/// Resolves each setting as flag (or environment) > config file > default and
/// records the result for the run manifest.
pub struct Resolver<'a> {
    file: &'a ConfigFile,
    resolved: Vec<(String, String)>,
}

impl<'a> Resolver<'a> {
    pub fn new(file: &'a ConfigFile) -> Self {
        Self {
            file,
            resolved: Vec::new(),
        }
    }

    fn file_value<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.file.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("config key '{key}': cannot parse '{v}'"))),
        }
    }

    pub fn optional<T: Setting>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        let v = match flag {
            Some(v) => Some(v),
            None => self.file_value(key)?,
        };
        if let Some(v) = &v {
            self.resolved.push((key.to_string(), v.render()));
        }
        Ok(v)
    }

    pub fn value<T: Setting>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        let v = self.optional(key, flag)?;
        match v {
            Some(v) => Ok(v),
            None => {
                self.resolved.push((key.to_string(), default.render()));
                Ok(default)
            }
        }
    }

    pub fn required<T: Setting>(&mut self, key: &str, flag: Option<T>) -> Result<T> {
        self.optional(key, flag)?.ok_or_else(|| {
            Error::Config(format!("missing required setting '{}'", key.replace('_', "-")))
        })
    }

    /// Fails on config-file keys that no setting asked for.
    pub fn finish(self) -> Result<Vec<(String, String)>> {
        let known: Vec<&str> = self.resolved.iter().map(|(k, _)| k.as_str()).collect();
        let unknown: Vec<&str> = self
            .file
            .entries
            .keys()
            .map(String::as_str)
            .filter(|k| !k.starts_with(RUN_PREFIX) && !known.contains(k))
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        Ok(self.resolved)
    }
}
