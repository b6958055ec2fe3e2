//! HTTP endpoints of the curation service.
//!
//! - `GET /scenes?offset=&limit=&status=` paged id and status list
//! - `GET /scenes/{id}` scene payload
//! - `POST /scenes/{id}/decision` with `{"decision": "accepted" | "rejected"}`
//! - `GET /export` accepted ids

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use tower_http::cors::CorsLayer;

use super::{CurationStore, Decision};
use crate::error::{Error, Result};

const DEFAULT_LIMIT: usize = 100;
const MAX_LIMIT: usize = 1000;

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": msg.into() }))).into_response()
}

fn from_error(e: Error) -> Response {
    match e {
        Error::NotFound(m) => error(StatusCode::NOT_FOUND, m),
        Error::RejectedInput(m) => error(StatusCode::BAD_REQUEST, m),
        other => error(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
    }
}

#[derive(Deserialize)]
struct ListQuery {
    offset: Option<usize>,
    limit: Option<usize>,
    status: Option<Decision>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DecisionBody {
    decision: Decision,
    reviewer: Option<String>,
    note: Option<String>,
}

async fn list(State(store): State<Arc<CurationStore>>, query: Result<Query<ListQuery>, QueryRejection>) -> Response {
    let Ok(Query(q)) = query else {
        return error(StatusCode::BAD_REQUEST, "offset and limit must be non-negative integers, status a decision");
    };
    let limit = q.limit.unwrap_or(DEFAULT_LIMIT).min(MAX_LIMIT);
    Json(store.list(q.offset.unwrap_or(0), limit, q.status)).into_response()
}

async fn scene(State(store): State<Arc<CurationStore>>, Path(id): Path<String>) -> Response {
    match store.payload(&id) {
        Ok(p) => Json(p).into_response(),
        Err(e) => from_error(e),
    }
}

async fn decide(State(store): State<Arc<CurationStore>>, Path(id): Path<String>, body: Bytes) -> Response {
    if !store.contains(&id) {
        return error(StatusCode::NOT_FOUND, format!("scene {id}"));
    }
    let body: DecisionBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed decision: {e}")),
    };
    match store.decide(&id, body.decision, body.reviewer, body.note) {
        Ok(r) => Json(r).into_response(),
        Err(e) => from_error(e),
    }
}

async fn export(State(store): State<Arc<CurationStore>>) -> Response {
    Json(store.accepted()).into_response()
}

pub fn router(store: Arc<CurationStore>) -> Router {
    Router::new()
        .route("/scenes", get(list))
        .route("/scenes/{id}", get(scene))
        .route("/scenes/{id}/decision", post(decide))
        .route("/export", get(export))
        .layer(CorsLayer::permissive())
        .with_state(store)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    store: Arc<CurationStore>,
    addr: SocketAddr,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("curation service listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(store)).with_graceful_shutdown(shutdown).await?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curation::tests::generated_dir;
    use axum::body::Body;
    use axum::http::Request;
    use http_body_util::BodyExt;
    use tower::ServiceExt;

    async fn call(app: &Router, method: &str, uri: &str, body: &str) -> (StatusCode, serde_json::Value) {
        let req = Request::builder()
            .method(method)
            .uri(uri)
            .header("content-type", "application/json")
            .body(Body::from(body.to_string()))
            .unwrap();
        let resp = app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        (status, serde_json::from_slice(&bytes).unwrap_or(serde_json::Value::Null))
    }

    #[tokio::test]
    async fn endpoints() {
        let dir = generated_dir(3);
        let store = Arc::new(CurationStore::open(dir.path(), dir.path().join("log.jsonl")).unwrap());
        let app = router(store);
        let (s, v) = call(&app, "GET", "/export", "").await;
        assert_eq!((s, v), (StatusCode::OK, serde_json::json!([])));
        let (s, _) = call(&app, "POST", "/scenes/gen_00001/decision", r#"{"decision":"accepted"}"#).await;
        assert_eq!(s, StatusCode::OK);
        let (_, v) = call(&app, "GET", "/scenes?status=accepted", "").await;
        assert_eq!(v["items"][0]["id"], "gen_00001");
        assert_eq!(v["items"][0]["status"], "accepted");
        let (_, v) = call(&app, "GET", "/scenes?offset=1&limit=1", "").await;
        assert_eq!((v["total"].as_u64(), v["items"].as_array().unwrap().len()), (Some(3), 1));
        for bad in [r#"{"decision":"maybe"}"#, r#"{"decision":"pending"}"#, "not json", r#"{}"#] {
            let (s, _) = call(&app, "POST", "/scenes/gen_00000/decision", bad).await;
            assert_eq!(s, StatusCode::BAD_REQUEST, "{bad}");
        }
        let (s, _) = call(&app, "POST", "/scenes/missing/decision", r#"{"decision":"accepted"}"#).await;
        assert_eq!(s, StatusCode::NOT_FOUND);
        let (s, _) = call(&app, "GET", "/scenes/missing", "").await;
        assert_eq!(s, StatusCode::NOT_FOUND);
        let (s, v) = call(&app, "GET", "/scenes/gen_00002", "").await;
        assert_eq!((s, v["schema"].as_str()), (StatusCode::OK, Some("v1")));
        let (s, _) = call(&app, "GET", "/scenes?limit=-1", "").await;
        assert_eq!(s, StatusCode::BAD_REQUEST);
        let (_, v) = call(&app, "GET", "/export", "").await;
        assert_eq!(v, serde_json::json!(["gen_00001"]));
    }
}
