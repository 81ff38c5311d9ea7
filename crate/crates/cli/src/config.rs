//! Flat key=value run configuration: file parsing, flag overrides and the
//! resolved-config echo written next to every command's outputs.

use labeldiff_core::{Error, Result};
use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

/// Parsed key=value config file. Keys are validated against the invoking
/// command's allow-list; unknown keys are usage errors.
#[derive(Debug, Clone, Default)]
pub struct ConfigMap {
    map: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read config {}: {e}", path.display())))?;
        let mut map = BTreeMap::new();
        for (i, line) in body.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Parameter(format!("config line {}: expected key=value", i + 1))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self { map })
    }

    pub fn reject_unknown(&self, allowed: &[&str]) -> Result<()> {
        for k in self.map.keys() {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::Parameter(format!("unknown config key `{k}`")));
            }
        }
        Ok(())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.map.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::Parameter(format!("config key `{key}`: bad value `{raw}`"))),
        }
    }
}

/// Flag value, else config-file value, else default.
pub fn resolve<T: FromStr + Clone>(
    flag: &Option<T>,
    cfg: &ConfigMap,
    key: &str,
    default: T,
) -> Result<T> {
    if let Some(v) = flag {
        return Ok(v.clone());
    }
    Ok(cfg.get::<T>(key)?.unwrap_or(default))
}

/// Accumulates the fully resolved configuration for the echo file.
#[derive(Debug, Default)]
pub struct ResolvedConfig {
    entries: BTreeMap<String, String>,
}

impl ResolvedConfig {
    pub fn put(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for (k, v) in &self.entries {
            body.push_str(&format!("{k}={v}\n"));
        }
        std::fs::write(path, body)?;
        Ok(())
    }
}
