//! Flat `key = value` configuration files with `[section]` headers.
//!
//! No nesting, no quoting; values are numbers or comma-separated number
//! lists. Unknown sections or keys are rejected so typos cannot silently
//! fall back to defaults.

use anyhow::{anyhow, bail, Context, Result};
use std::collections::BTreeMap;

#[derive(Debug, Default)]
pub struct ConfigFile {
    sections: BTreeMap<String, BTreeMap<String, String>>,
    /// Keys actually consumed by the experiment, for unknown-key detection.
    used: std::cell::RefCell<Vec<(String, String)>>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current = String::from("");
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| anyhow!("line {}: unterminated section header", lineno + 1))?;
                current = name.trim().to_string();
                sections.entry(current.clone()).or_default();
            } else if let Some((key, value)) = line.split_once('=') {
                sections
                    .entry(current.clone())
                    .or_default()
                    .insert(key.trim().to_string(), value.trim().to_string());
            } else {
                bail!("line {}: expected `key = value` or `[section]`", lineno + 1);
            }
        }
        Ok(Self {
            sections,
            used: std::cell::RefCell::new(Vec::new()),
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text)
    }

    fn raw(&self, section: &str, key: &str) -> Option<&str> {
        self.used
            .borrow_mut()
            .push((section.to_string(), key.to_string()));
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    pub fn f64(&self, section: &str, key: &str, target: &mut f64) -> Result<()> {
        if let Some(v) = self.raw(section, key) {
            *target = v
                .parse()
                .with_context(|| format!("[{section}] {key} = {v}: not a number"))?;
        }
        Ok(())
    }

    pub fn usize(&self, section: &str, key: &str, target: &mut usize) -> Result<()> {
        if let Some(v) = self.raw(section, key) {
            *target = v
                .parse()
                .with_context(|| format!("[{section}] {key} = {v}: not an integer"))?;
        }
        Ok(())
    }

    pub fn u64(&self, section: &str, key: &str, target: &mut u64) -> Result<()> {
        if let Some(v) = self.raw(section, key) {
            *target = v
                .parse()
                .with_context(|| format!("[{section}] {key} = {v}: not an integer"))?;
        }
        Ok(())
    }

    pub fn u8(&self, section: &str, key: &str, target: &mut u8) -> Result<()> {
        if let Some(v) = self.raw(section, key) {
            *target = v
                .parse()
                .with_context(|| format!("[{section}] {key} = {v}: not an integer"))?;
        }
        Ok(())
    }

    pub fn list_f64(&self, section: &str, key: &str, target: &mut Vec<f64>) -> Result<()> {
        if let Some(v) = self.raw(section, key) {
            *target = v
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .with_context(|| format!("[{section}] {key} = {v}: not a number list"))?;
        }
        Ok(())
    }

    pub fn list_usize(&self, section: &str, key: &str, target: &mut Vec<usize>) -> Result<()> {
        if let Some(v) = self.raw(section, key) {
            *target = v
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .with_context(|| format!("[{section}] {key} = {v}: not an integer list"))?;
        }
        Ok(())
    }

    pub fn list_u64(&self, section: &str, key: &str, target: &mut Vec<u64>) -> Result<()> {
        if let Some(v) = self.raw(section, key) {
            *target = v
                .split(',')
                .map(|s| s.trim().parse::<u64>())
                .collect::<std::result::Result<_, _>>()
                .with_context(|| format!("[{section}] {key} = {v}: not an integer list"))?;
        }
        Ok(())
    }

    /// Errors if the file contains keys the experiment never read.
    pub fn reject_unknown(&self) -> Result<()> {
        let used = self.used.borrow();
        for (section, keys) in &self.sections {
            for key in keys.keys() {
                let known = used
                    .iter()
                    .any(|(s, k)| s == section && k == key);
                if !known {
                    bail!("unknown config key [{section}] {key}");
                }
            }
        }
        Ok(())
    }
}
