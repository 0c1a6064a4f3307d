//! JSON scene manifest tying cameras to image, pointmap and asset files.
//! File paths are relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AssetError, Result};
use crate::geometry::{Camera, SceneNormalization};
use crate::render::SyntheticScene;
use crate::synth::{PathKind, PathParams};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewRole {
    /// Conditioning view given to reconstruction.
    Source,
    /// Withheld for evaluation.
    Heldout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    /// Camera in the normalized scene frame.
    pub camera: Camera,
    pub role: ViewRole,
    pub image: PathBuf,
    pub pointmap: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub kind: PathKind,
    pub num_views: usize,
    pub params: PathParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub version: u32,
    pub seed: u64,
    /// Procedural source scene, in the original (unnormalized) frame.
    pub scene: SyntheticScene,
    /// Maps the original frame to the normalized one.
    pub normalization: SceneNormalization,
    pub views: Vec<ViewRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathRecord>,
    #[serde(default)]
    pub assets: Vec<PathBuf>,
}

impl SceneManifest {
    pub fn views_with_role(&self, role: ViewRole) -> impl Iterator<Item = &ViewRecord> + '_ {
        self.views.iter().filter(move |v| v.role == role)
    }

    fn referenced_files(&self) -> impl Iterator<Item = &PathBuf> + '_ {
        self.views
            .iter()
            .flat_map(|v| [&v.image, &v.pointmap])
            .chain(&self.assets)
    }
}

pub fn write_manifest(manifest: &SceneManifest, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(manifest)?)?;
    Ok(())
}

/// Reads a manifest, checks its version and camera validity, and verifies
/// that every referenced file exists.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<SceneManifest> {
    let path = path.as_ref();
    let manifest: SceneManifest = serde_json::from_slice(&fs::read(path)?)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(AssetError::UnsupportedVersion {
            format: "manifest",
            found: manifest.version,
        });
    }
    if manifest.views.is_empty() {
        return Err(AssetError::InvalidManifest("no views".into()));
    }
    for (i, v) in manifest.views.iter().enumerate() {
        v.camera
            .validate()
            .map_err(|e| AssetError::InvalidManifest(format!("view {i}: {e}")))?;
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    for file in manifest.referenced_files() {
        let full = dir.join(file);
        if !full.is_file() {
            return Err(AssetError::MissingFile(full));
        }
    }
    Ok(manifest)
}
