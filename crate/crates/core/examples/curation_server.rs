//! Serves a directory of procedural scenes for review until interrupted.
//!
//! Usage: curation_server [addr] [scenes]

use std::sync::Arc;

use voxdiff::curation::{serve, CurationStore};
use voxdiff::scene::io::save_scene_as;
use voxdiff::toy::procedural_scene;

#[tokio::main(flavor = "current_thread")]
async fn main() -> voxdiff::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let addr = args.next().unwrap_or_else(|| "127.0.0.1:8080".into());
    let n: u64 = args.next().map_or(20, |a| a.parse().expect("numeric count"));
    let dir = std::env::temp_dir().join("voxdiff-curation-example");
    for s in 0..n {
        save_scene_as(&procedural_scene(s, [64, 64, 16])?, dir.join("generated"), &format!("gen_{s:05}"))?;
    }
    let store = CurationStore::open(dir.join("generated"), dir.join("records.jsonl"))?;
    println!("{} scenes in {}; GET /scenes, POST /scenes/<id>/decision, GET /export", store.len(), dir.display());
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    serve(Arc::new(store), addr.parse().expect("socket address"), shutdown).await
}
