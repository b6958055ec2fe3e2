//! Curation of generated scenes: an append-only decision log, the HTTP
//! service that reviewers drive and the export of accepted scenes.
//!
//! The log holds one JSON object per line. Replaying it in order, with the
//! last entry per scene winning, reconstructs the current decisions.

mod export;
mod server;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels;
use crate::lidar::{self, LidarCloud};
use crate::scene::io::{list_scenes, load_scene};

pub use export::{export_curated, ExportSummary};
pub use server::{router, serve};

/// Source recorded for scenes sampled without a condition.
pub const UNCONDITIONAL: &str = "unconditional";
/// Optional `{scene id: source}` map in a generated directory.
pub const SOURCES_FILE: &str = "sources.json";
/// Payload schema version served by `GET /scenes/{id}`.
pub const SCHEMA_VERSION: &str = "v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Pending,
    Accepted,
    Rejected,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Pending => "pending",
            Decision::Accepted => "accepted",
            Decision::Rejected => "rejected",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationRecord {
    pub scene_id: String,
    /// Condition scan id, or [`UNCONDITIONAL`].
    pub source: String,
    pub decision: Decision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

/// Replays a decision log; the last record per scene wins. A final line
/// without a trailing newline that fails to parse is a torn write and is
/// skipped.
pub fn read_records(path: impl AsRef<Path>) -> Result<BTreeMap<String, CurationRecord>> {
    let path = path.as_ref();
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(BTreeMap::new()),
        Err(e) => return Err(e.into()),
    };
    let torn_tail = !text.is_empty() && !text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut out = BTreeMap::new();
    for (n, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<CurationRecord>(line) {
            Ok(r) => {
                out.insert(r.scene_id.clone(), r);
            }
            Err(_) if torn_tail && n + 1 == lines.len() => {
                log::warn!("{}: ignoring torn final record", path.display());
            }
            Err(e) => {
                return Err(Error::Format { path: Some(path.to_path_buf()), reason: format!("line {}: {e}", n + 1) })
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct SceneEntry {
    path: PathBuf,
    source: String,
    condition: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSummary {
    pub id: String,
    pub source: String,
    pub status: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePage {
    /// Scenes matching the filter.
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub counts: BTreeMap<Decision, usize>,
    pub items: Vec<SceneSummary>,
}

/// Scenes of a generated directory plus their decisions. Reads take a
/// shared lock; decisions are serialized through a single log writer and
/// made durable before they become visible.
pub struct CurationStore {
    scenes: BTreeMap<String, SceneEntry>,
    records: RwLock<BTreeMap<String, CurationRecord>>,
    log: Mutex<File>,
}

/// `<dir>/<id>.cond.lidar`, the condition cloud copied next to a scene.
pub fn condition_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.cond.{}", lidar::EXTENSION))
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl CurationStore {
    pub fn open(generated: impl AsRef<Path>, records: impl AsRef<Path>) -> Result<Self> {
        let dir = generated.as_ref();
        let sources: BTreeMap<String, String> = match fs::read(dir.join(SOURCES_FILE)) {
            Ok(b) => serde_json::from_slice(&b)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(e.into()),
        };
        let scenes = list_scenes(dir)?
            .into_iter()
            .map(|(id, path)| {
                let cond = condition_path(dir, &id);
                let entry = SceneEntry {
                    path,
                    source: sources.get(&id).cloned().unwrap_or_else(|| UNCONDITIONAL.into()),
                    condition: cond.exists().then_some(cond),
                };
                (id, entry)
            })
            .collect();
        let existing = read_records(records.as_ref())?;
        let log = OpenOptions::new().create(true).append(true).open(records.as_ref())?;
        let bytes = fs::read(records.as_ref())?;
        if bytes.last().is_some_and(|&b| b != b'\n') {
            let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
            log.set_len(keep as u64)?;
        }
        Ok(Self { scenes, records: RwLock::new(existing), log: Mutex::new(log) })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.scenes.contains_key(id)
    }

    pub fn status(&self, id: &str) -> Decision {
        self.records.read().expect("records lock").get(id).map_or(Decision::Pending, |r| r.decision)
    }

    /// Scenes in id order, optionally filtered by status.
    pub fn list(&self, offset: usize, limit: usize, status: Option<Decision>) -> ScenePage {
        let records = self.records.read().expect("records lock");
        let mut counts: BTreeMap<Decision, usize> =
            [Decision::Pending, Decision::Accepted, Decision::Rejected].into_iter().map(|d| (d, 0)).collect();
        let mut matching = Vec::new();
        for (id, e) in &self.scenes {
            let s = records.get(id).map_or(Decision::Pending, |r| r.decision);
            *counts.entry(s).or_default() += 1;
            if status.is_none_or(|want| want == s) {
                matching.push(SceneSummary { id: id.clone(), source: e.source.clone(), status: s });
            }
        }
        let total = matching.len();
        let items = matching.into_iter().skip(offset).take(limit).collect();
        ScenePage { total, offset, limit, counts, items }
    }

    /// Versioned JSON payload of one scene.
    pub fn payload(&self, id: &str) -> Result<serde_json::Value> {
        let e = self.scenes.get(id).ok_or_else(|| Error::NotFound(format!("scene {id}")))?;
        let scene = load_scene(&e.path)?;
        let g = scene.grid();
        let c = scene.num_classes();
        let palette: Vec<serde_json::Value> = (1..=c)
            .map(|k| {
                let name = if c == labels::NUM_CLASSES { labels::class_name(k).unwrap_or("?").to_string() } else { format!("class {k}") };
                serde_json::json!({ "id": k, "name": name, "color": labels::class_color(k, c) })
            })
            .collect();
        let condition = match &e.condition {
            Some(p) => {
                let cloud = LidarCloud::load(p)?;
                serde_json::json!({ "points": cloud.points, "labels": cloud.labels })
            }
            None => serde_json::Value::Null,
        };
        Ok(serde_json::json!({
            "schema": SCHEMA_VERSION,
            "id": id,
            "source": e.source,
            "status": self.status(id),
            "grid": {
                "min_corner": g.min_corner(),
                "max_corner": g.max_corner(),
                "resolution": g.resolution(),
                "dims": g.dims(),
            },
            "num_classes": c,
            "palette": palette,
            "coords": scene.coords(),
            "labels": scene.labels(),
            "condition": condition,
        }))
    }

    /// Records a decision. The log line is flushed to disk before the
    /// in-memory state changes.
    pub fn decide(&self, id: &str, decision: Decision, reviewer: Option<String>, note: Option<String>) -> Result<CurationRecord> {
        let e = self.scenes.get(id).ok_or_else(|| Error::NotFound(format!("scene {id}")))?;
        if decision == Decision::Pending {
            return Err(Error::RejectedInput("a decision must be accepted or rejected".into()));
        }
        let record = CurationRecord { scene_id: id.to_string(), source: e.source.clone(), decision, reviewer, note, timestamp: now() };
        let mut line = serde_json::to_vec(&record)?;
        line.push(b'\n');
        let mut log = self.log.lock().expect("log lock");
        log.write_all(&line)?;
        log.sync_data()?;
        self.records.write().expect("records lock").insert(id.to_string(), record.clone());
        Ok(record)
    }

    /// Accepted scene ids in order.
    pub fn accepted(&self) -> Vec<String> {
        let records = self.records.read().expect("records lock");
        self.scenes.keys().filter(|id| records.get(*id).is_some_and(|r| r.decision == Decision::Accepted)).cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::io::save_scene_as;
    use crate::toy::procedural_scene;

    pub(crate) fn generated_dir(n: usize) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        let scene = procedural_scene(0, [8, 8, 4]).unwrap();
        for i in 0..n {
            save_scene_as(&scene, dir.path(), &format!("gen_{i:05}")).unwrap();
        }
        dir
    }

    #[test]
    fn decisions_survive_reopen() {
        let dir = generated_dir(3);
        let log = dir.path().join("decisions.jsonl");
        let store = CurationStore::open(dir.path(), &log).unwrap();
        assert_eq!(store.list(0, 10, None).counts[&Decision::Pending], 3);
        store.decide("gen_00000", Decision::Accepted, Some("r".into()), None).unwrap();
        store.decide("gen_00001", Decision::Accepted, None, None).unwrap();
        store.decide("gen_00001", Decision::Rejected, None, Some("floating".into())).unwrap();
        assert!(store.decide("gen_00002", Decision::Pending, None, None).is_err());
        assert!(matches!(store.decide("nope", Decision::Accepted, None, None), Err(Error::NotFound(_))));
        drop(store);
        let again = CurationStore::open(dir.path(), &log).unwrap();
        assert_eq!(again.accepted(), ["gen_00000"]);
        assert_eq!(again.status("gen_00001"), Decision::Rejected);
        assert_eq!(again.list(0, 10, Some(Decision::Pending)).items.len(), 1);
    }

    #[test]
    fn torn_tail_is_skipped_but_corruption_is_not() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        let good = r#"{"scene_id":"a","source":"unconditional","decision":"accepted","timestamp":1}"#;
        fs::write(&p, format!("{good}\n{{\"scene_id\":\"b\",\"sou")).unwrap();
        assert_eq!(read_records(&p).unwrap().len(), 1);
        fs::write(&p, format!("garbage\n{good}\n")).unwrap();
        assert!(read_records(&p).is_err());
        assert!(read_records(dir.path().join("missing")).unwrap().is_empty());
    }

    #[test]
    fn payload_schema() {
        let dir = generated_dir(1);
        let store = CurationStore::open(dir.path(), dir.path().join("log.jsonl")).unwrap();
        let p = store.payload("gen_00000").unwrap();
        assert_eq!(p["schema"], "v1");
        assert_eq!(p["coords"].as_array().unwrap().len(), p["labels"].as_array().unwrap().len());
        assert_eq!(p["palette"].as_array().unwrap().len(), 4);
        assert!(p["condition"].is_null());
        assert_eq!(p["status"], "pending");
    }
}
