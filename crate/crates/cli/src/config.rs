//! Optional TOML defaults. Flags win over the file, the file wins over the
//! built-in defaults.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Deserialize;

#[derive(Debug, Default, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct FileConfig {
    pub resolution: Option<usize>,
    pub views: Option<usize>,
    pub heldout: Option<usize>,
    pub complexity: Option<usize>,
    pub seed: Option<u64>,
    pub tile_size: Option<usize>,
    pub opacity_threshold: Option<f64>,
    pub schedule: Option<String>,
    pub steps: Option<usize>,
    pub eta: Option<f64>,
    pub samples: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// First of flag, config value, default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}
