mod common;

use axum::http::StatusCode;
use common::{app, call, error_code, ingest_all};
use serde_json::json;

#[tokio::test]
async fn health_and_config() {
    let app = app();
    let (s, body) = call(&app, "GET", "/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, json!({"status": "ok", "version": env!("CARGO_PKG_VERSION")}));
    let (s, body) = call(&app, "GET", "/api/config", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["defaults"]["top_k"], 3);
    assert_eq!(body["defaults"]["max_tokens"], 768);
    assert_eq!(body["sweep_top_ks"], json!([2, 3, 4, 6]));
    assert!(body.get("embedder").is_none());
}

#[tokio::test]
async fn query_returns_ranked_hits() {
    let app = app();
    ingest_all(&app).await;
    let (s, body) = call(
        &app,
        "POST",
        "/api/query",
        Some(json!({"text": "what causes keyhole porosity in powder bed fusion", "temperature": 0.0})),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{body}");
    let keys: Vec<&str> = body.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, ["answer", "finish_reason", "hits", "no_context"]);
    let hits = body["hits"].as_array().unwrap();
    assert_eq!(hits.len(), 3);
    assert_eq!(hits[0]["doc_id"], "lpbf");
    let scores: Vec<f64> = hits.iter().map(|h| h["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    for s in scores {
        assert_eq!((s * 1e6).round() / 1e6, s);
    }
    assert_eq!(body["no_context"], false);
}

#[tokio::test]
async fn empty_index_answers_without_context() {
    let app = app();
    let (s, body) = call(&app, "POST", "/api/query", Some(json!({"text": "anything"}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["no_context"], true);
    assert_eq!(body["hits"], json!([]));
}

#[tokio::test]
async fn validation_errors() {
    let app = app();
    let cases = [
        ("/api/query", json!({"text": "q", "system_prompt_id": "pirate"}), StatusCode::BAD_REQUEST, "BAD_PRESET"),
        ("/api/query", json!({"text": "   "}), StatusCode::BAD_REQUEST, "EMPTY_TEXT"),
        ("/api/query", json!({"text": "q", "top_k": 0}), StatusCode::BAD_REQUEST, "BAD_PARAMS"),
        ("/api/query", json!({"text": "q", "temperature": -1.0}), StatusCode::BAD_REQUEST, "BAD_PARAMS"),
        ("/api/query", json!({"nope": 1}), StatusCode::BAD_REQUEST, "BAD_REQUEST"),
        ("/api/ingest", json!({"doc_id": "x", "text": "  "}), StatusCode::BAD_REQUEST, "EMPTY_DOCUMENT"),
        ("/api/ingest", json!({"doc_id": "", "text": "words"}), StatusCode::BAD_REQUEST, "BAD_DOCUMENT"),
        ("/api/sessions", json!({"system_prompt_id": "custom"}), StatusCode::BAD_REQUEST, "BAD_PRESET"),
    ];
    for (uri, body, status, code) in cases {
        let (s, resp) = call(&app, "POST", uri, Some(body.clone())).await;
        assert_eq!(s, status, "{uri} {body} -> {resp}");
        assert_eq!(error_code(&resp), code, "{uri} {body}");
    }
}

#[tokio::test]
async fn unknown_routes_and_sessions() {
    let app = app();
    let (s, body) = call(&app, "GET", "/api/nowhere", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&body), "NOT_FOUND");
    let (s, body) = call(&app, "GET", "/api/query", None).await;
    assert_eq!(s, StatusCode::METHOD_NOT_ALLOWED);
    assert_eq!(error_code(&body), "METHOD_NOT_ALLOWED");
    let (s, body) = call(&app, "GET", "/api/sessions/missing", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&body), "SESSION_NOT_FOUND");
    let (s, body) = call(&app, "POST", "/api/sessions/missing/messages", Some(json!({"text": "hi"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&body), "SESSION_NOT_FOUND");
}

#[tokio::test]
async fn session_memory_flows_into_prompt() {
    let app = app();
    ingest_all(&app).await;
    let (s, body) = call(&app, "POST", "/api/sessions", Some(json!({"memory_window": 2}))).await;
    assert_eq!(s, StatusCode::CREATED);
    let id = body["session_id"].as_str().unwrap().to_string();
    let uri = format!("/api/sessions/{id}/messages");
    let (_, first) = call(&app, "POST", &uri, Some(json!({"text": "what is wire EDM", "top_k": 1}))).await;
    assert_eq!(first["turn_index"], 0);
    assert_eq!(first["hits"].as_array().unwrap().len(), 1);
    let (_, second) = call(&app, "POST", &uri, Some(json!({"text": "and DED?", "debug": true}))).await;
    assert_eq!(second["turn_index"], 1);
    let prompt = second["prompt"].as_array().unwrap();
    let roles: Vec<&str> = prompt.iter().map(|m| m["role"].as_str().unwrap()).collect();
    assert_eq!(roles, ["system", "user", "user", "assistant", "user"]);
    assert!(prompt[1]["content"].as_str().unwrap().starts_with("Context:\n["));
    assert_eq!(prompt[2]["content"], "what is wire EDM");
    assert_eq!(prompt[3]["content"], first["answer"]);
    assert_eq!(prompt[4]["content"], "and DED?");
    let (s, body) = call(&app, "POST", &uri, Some(json!({"text": "x", "system_prompt_id": "populariser"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    error_code(&body);
    let (_, transcript) = call(&app, "GET", &format!("/api/sessions/{id}"), None).await;
    assert_eq!(transcript["turns"].as_array().unwrap().len(), 2);
    assert_eq!(transcript["turns"][0]["params"]["top_k"], 1);
}
