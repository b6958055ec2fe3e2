use std::fs;
use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use voxdiff::curation::{export_curated, read_records, router, CurationStore, SOURCES_FILE};
use voxdiff::scene::io::save_scene_as;
use voxdiff::toy::procedural_scene;

fn generated(dir: &Path, n: usize) {
    let mut sources = serde_json::Map::new();
    for i in 0..n {
        let id = format!("gen_{i:05}");
        save_scene_as(&procedural_scene(i as u64, [8, 8, 4]).unwrap(), dir, &id).unwrap();
        sources.insert(id, json!(if i % 2 == 0 { "scan_a" } else { "scan_b" }));
    }
    fs::write(dir.join(SOURCES_FILE), Value::Object(sources).to_string()).unwrap();
}

async fn call(app: &Router, method: &str, uri: &str, body: Value) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(if body.is_null() { String::new() } else { body.to_string() }))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

#[tokio::test]
async fn review_restart_and_export() {
    let tmp = tempfile::tempdir().unwrap();
    let (gen, log) = (tmp.path().join("gen"), tmp.path().join("records.jsonl"));
    generated(&gen, 100);
    let app = router(Arc::new(CurationStore::open(&gen, &log).unwrap()));

    let (s, page) = call(&app, "GET", "/scenes?limit=1000", Value::Null).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(page["total"], 100);
    let ids: Vec<String> = page["items"].as_array().unwrap().iter().map(|x| x["id"].as_str().unwrap().to_string()).collect();
    assert_eq!(ids.len(), 100);

    let (s, payload) = call(&app, "GET", "/scenes/gen_00004", Value::Null).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(payload["coords"].as_array().unwrap().len(), payload["labels"].as_array().unwrap().len());
    assert_eq!(payload["source"], "scan_a");

    let accepted: Vec<&String> = ids.iter().step_by(2).take(37).collect();
    for id in &ids {
        let decision = if accepted.contains(&id) { "accepted" } else { "rejected" };
        let (s, _) = call(&app, "POST", &format!("/scenes/{id}/decision"), json!({ "decision": decision, "reviewer": "r1" })).await;
        assert_eq!(s, StatusCode::OK);
    }
    let (s, _) = call(&app, "POST", "/scenes/gen_00000/decision", json!({ "decision": "accepted", "extra": 1 })).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    drop(app);

    let app = router(Arc::new(CurationStore::open(&gen, &log).unwrap()));
    let (_, page) = call(&app, "GET", "/scenes?status=accepted&limit=1000", Value::Null).await;
    assert_eq!(page["total"], 37);
    assert_eq!(page["counts"], json!({ "pending": 0, "accepted": 37, "rejected": 63 }));
    assert_eq!(page["items"].as_array().unwrap().len(), 37);
    let (_, export) = call(&app, "GET", "/export", Value::Null).await;
    let mut expected: Vec<&str> = accepted.iter().map(|s| s.as_str()).collect();
    expected.sort();
    assert_eq!(export, json!(expected));
    assert_eq!(read_records(&log).unwrap().len(), 100);

    let out = tmp.path().join("curated");
    let summary = export_curated(&log, &gen, &out).unwrap();
    assert_eq!(summary.total, 37);
    assert_eq!(summary.per_source.values().sum::<usize>(), 37);
    assert_eq!(summary.per_source["scan_a"], 37);
    assert_eq!(fs::read_dir(&out).unwrap().count(), 37 + 1);
}

#[tokio::test]
async fn torn_log_tail_is_ignored_on_restart() {
    let tmp = tempfile::tempdir().unwrap();
    let (gen, log) = (tmp.path().join("gen"), tmp.path().join("records.jsonl"));
    generated(&gen, 3);
    let app = router(Arc::new(CurationStore::open(&gen, &log).unwrap()));
    call(&app, "POST", "/scenes/gen_00001/decision", json!({ "decision": "accepted" })).await;
    drop(app);
    let mut bytes = fs::read(&log).unwrap();
    bytes.extend_from_slice(br#"{"scene_id":"gen_00002","deci"#);
    fs::write(&log, bytes).unwrap();
    let app = router(Arc::new(CurationStore::open(&gen, &log).unwrap()));
    let (_, export) = call(&app, "GET", "/export", Value::Null).await;
    assert_eq!(export, json!(["gen_00001"]));
    let (s, _) = call(&app, "POST", "/scenes/gen_00002/decision", json!({ "decision": "accepted" })).await;
    assert_eq!(s, StatusCode::OK);
    drop(app);
    assert_eq!(read_records(&log).unwrap().len(), 2);
    let app = router(Arc::new(CurationStore::open(&gen, &log).unwrap()));
    let (_, export) = call(&app, "GET", "/export", Value::Null).await;
    assert_eq!(export, json!(["gen_00001", "gen_00002"]));
}
