//! Manifest schema and serialization.
//!
//! One COCO-style JSON schema serves real and synthetic datasets:
//! `images[{id,file,height,width}]`, `categories[{id,name}]`,
//! `annotations[{id,image_id,category_id,segmentation|bbox}]`.
//! Segmentation is a list of polygon rings (flat x,y coordinate lists,
//! even-odd fill); bbox is `[x, y, w, h]` in pixels.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub images: Vec<ManifestImage>,
    pub categories: Vec<ManifestCategory>,
    pub annotations: Vec<ManifestAnnotation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestImage {
    pub id: u64,
    pub file: String,
    pub height: u32,
    pub width: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestCategory {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
}

impl Manifest {
    pub fn from_path(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text)?;
        Ok(())
    }

    /// Referential integrity: every annotation must point at a declared
    /// image and category, and ids must be unique.
    pub fn validate(&self) -> Result<()> {
        let image_ids: BTreeSet<u64> = self.images.iter().map(|i| i.id).collect();
        if image_ids.len() != self.images.len() {
            return Err(Error::Manifest("duplicate image ids".into()));
        }
        let category_ids: BTreeSet<u32> = self.categories.iter().map(|c| c.id).collect();
        if category_ids.len() != self.categories.len() {
            return Err(Error::Manifest("duplicate category ids".into()));
        }
        let mut dangling = Vec::new();
        for ann in &self.annotations {
            if !image_ids.contains(&ann.image_id) {
                dangling.push(format!("annotation {} -> image {}", ann.id, ann.image_id));
            }
            if !category_ids.contains(&ann.category_id) {
                dangling.push(format!("annotation {} -> category {}", ann.id, ann.category_id));
            }
        }
        if !dangling.is_empty() {
            return Err(Error::Manifest(format!(
                "dangling references: {}",
                dangling.join(", ")
            )));
        }
        Ok(())
    }
}
