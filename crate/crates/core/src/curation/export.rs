//! Copies accepted scenes into a curated dataset directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{condition_path, read_records, Decision};
use crate::error::{Error, Result};
use crate::scene::io::EXTENSION;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub total: usize,
    pub per_source: BTreeMap<String, usize>,
    pub ids: Vec<String>,
}

/// Copies every accepted scene (and its condition cloud, if any) from
/// `scenes` into `out` and writes a manifest with counts per source. Fails
/// before copying anything if an accepted scene file is missing.
pub fn export_curated(records: impl AsRef<Path>, scenes: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<ExportSummary> {
    let (scenes, out) = (scenes.as_ref(), out.as_ref());
    let accepted: Vec<_> = read_records(records)?.into_values().filter(|r| r.decision == Decision::Accepted).collect();
    let missing: Vec<String> = accepted
        .iter()
        .filter(|r| !scenes.join(format!("{}.{EXTENSION}", r.scene_id)).is_file())
        .map(|r| r.scene_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingScenes(missing));
    }
    fs::create_dir_all(out)?;
    let mut per_source = BTreeMap::new();
    let mut ids = Vec::with_capacity(accepted.len());
    for r in &accepted {
        let name = format!("{}.{EXTENSION}", r.scene_id);
        fs::copy(scenes.join(&name), out.join(&name))?;
        let cond = condition_path(scenes, &r.scene_id);
        if cond.is_file() {
            fs::copy(&cond, condition_path(out, &r.scene_id))?;
        }
        *per_source.entry(r.source.clone()).or_insert(0) += 1;
        ids.push(r.scene_id.clone());
    }
    let summary = ExportSummary { total: ids.len(), per_source, ids };
    fs::write(out.join(MANIFEST_FILE), serde_json::to_vec_pretty(&summary)?)?;
    Ok(summary)
}
