use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ulsa_core::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to repeat a command: the resolved arguments, seeds and
/// the files it read and wrote.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// Version byte of the ULSA containers written.
    pub artifact_version: u8,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Arguments with every default filled in, replayable as is.
    pub args: serde_json::Value,
    /// Derived settings (schedules, widths, episode config) for reference.
    pub resolved: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, args: &impl Serialize) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            artifact_version: ulsa_core::container::VERSION,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            args: to_value(args)?,
            resolved: serde_json::Value::Null,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

pub fn to_value(v: &impl Serialize) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::Format(e.to_string()))
}

/// Absolute form of a path for the manifest, left as is when it cannot be
/// resolved.
pub fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}
