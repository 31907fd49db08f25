//! Dataset index: one CSV row per sample with columns `id,image,mask,split`.
//! Relative paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::palette::decode_mask;
use super::Sample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: String,
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (row, rec) in reader.deserialize::<ManifestEntry>().enumerate() {
        let mut entry =
            rec.map_err(|e| Error::Manifest(format!("{} row {}: {e}", path.display(), row + 1)))?;
        if !seen.insert(entry.id.clone()) {
            return Err(Error::Manifest(format!(
                "{}: duplicate id `{}`",
                path.display(),
                entry.id
            )));
        }
        entry.image = base.join(&entry.image);
        entry.mask = base.join(&entry.mask);
        out.push(entry);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    for e in entries {
        w.serialize(e)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_entry(entry: &ManifestEntry) -> Result<Sample> {
    let image = image::open(&entry.image)?.to_rgb8();
    let raster = image::open(&entry.mask)?.to_rgb8();
    let decoded = decode_mask(&raster).map_err(|e| match e {
        Error::Annotation { reason, .. } => Error::Annotation {
            path: entry.mask.display().to_string(),
            reason,
        },
        other => other,
    })?;
    if decoded.off_palette > 0 {
        log::warn!(
            "{}: {} off-palette pixels snapped to the nearest class colour",
            entry.mask.display(),
            decoded.off_palette
        );
    }
    Sample::new(entry.id.clone(), image, decoded.map)
}

/// Loads every sample of `split` in manifest order.
pub fn load_samples(manifest: &Path, split: &str) -> Result<Vec<Sample>> {
    load_manifest(manifest)?
        .iter()
        .filter(|e| e.split == split)
        .map(load_entry)
        .collect()
}
