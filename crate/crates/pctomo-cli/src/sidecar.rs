//! Plain-text metadata written next to simulated data (`<data>.meta`).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, Context, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sidecar(pub BTreeMap<String, String>);

/// `path` with `suffix` appended to its file name.
pub fn companion(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

impl Sidecar {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.0.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|e| anyhow!("sidecar key {key}: {e}")))
            .transpose()
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| v.split(',').map(|x| x.trim().parse::<T>().map_err(|e| anyhow!("sidecar key {key}: {e}"))).collect())
            .transpose()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for (k, v) in &self.0 {
            s.push_str(&format!("{k}={v}\n"));
        }
        fs::write(path, s).with_context(|| format!("writing {}", path.display()))
    }

    /// Missing file gives an empty sidecar.
    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Sidecar::default());
        }
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut m = BTreeMap::new();
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                m.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        Ok(Sidecar(m))
    }
}
