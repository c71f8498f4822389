#![allow(dead_code)]

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use corpusqa::config::AppConfig;
use corpusqa::VectorIndex;
use corpusqa_gateway::server::{router, AppState};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

pub const DOCS: [(&str, &str); 3] = [
    (
        "lpbf",
        "Laser powder bed fusion melts thin layers of metal powder with a focused laser. \
         Keyhole porosity appears when the energy density is too high and the melt pool collapses.",
    ),
    (
        "ded",
        "Directed energy deposition feeds wire or powder into a melt pool created by a laser or arc. \
         It is used for repair and for large near-net-shape parts.",
    ),
    (
        "edm",
        "Electrical discharge machining removes material with sparks between an electrode and the part. \
         Wire EDM separates printed parts from the build plate.",
    ),
];

pub fn app() -> Router {
    let config = AppConfig::default();
    let engine = config.build_engine(VectorIndex::new()).unwrap();
    router(AppState::new(engine, config, None).unwrap())
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

pub async fn ingest_all(app: &Router) {
    for (doc_id, text) in DOCS {
        let (status, body) = call(
            app,
            "POST",
            "/api/ingest",
            Some(serde_json::json!({"doc_id": doc_id, "format": "plain", "text": text})),
        )
        .await;
        assert_eq!(status, StatusCode::OK, "{body}");
        assert_eq!(body, serde_json::json!({"chunks_added": 1}));
    }
}

/// Asserts `v` is `{"error":{"code":<UPPER_SNAKE>,"message":<string>}}` and returns the code.
pub fn error_code(v: &Value) -> String {
    let obj = v.as_object().expect("object body");
    assert_eq!(obj.len(), 1, "{v}");
    let err = obj["error"].as_object().expect("error object");
    assert_eq!(err.len(), 2, "{v}");
    assert!(err["message"].is_string());
    let code = err["code"].as_str().unwrap().to_string();
    assert!(!code.is_empty() && code.chars().all(|c| c.is_ascii_uppercase() || c == '_'), "{code}");
    code
}
