use std::fs;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use contextgpt::data;
use contextgpt::pipeline::RunConfig;
use contextgpt_cli::server::{router, AppState};

struct Fixture {
    dir: tempfile::TempDir,
    app: axum::Router,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    for file in [
        "schema.json",
        "phrases.json",
        "template.json",
        "pool.jsonl",
        "rules.json",
    ] {
        fs::copy(
            data::data_dir().join("domino").join(file),
            dir.path().join(file),
        )
        .unwrap();
    }
    let pipeline = RunConfig::for_dataset(dir.path()).build().unwrap();
    let app = router(AppState {
        pipeline: Arc::new(pipeline),
        default_k: 0.5,
        max_in_flight: 2,
    });
    Fixture { dir, app }
}

async fn call(
    app: &axum::Router,
    method: &str,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Value) {
    let builder = Request::builder().method(method).uri(uri);
    let request = match body {
        Some(b) => builder
            .header("content-type", "application/json")
            .body(Body::from(b.to_string())),
        None => builder.body(Body::empty()),
    }
    .unwrap();
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = response.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

#[tokio::test]
async fn activities_come_in_schema_order() {
    let f = fixture();
    let (status, body) = call(&f.app, "GET", "/activities", None).await;
    assert_eq!(status, StatusCode::OK);
    let names: Vec<String> = serde_json::from_value(body).unwrap();
    assert_eq!(names.len(), 14);
    assert_eq!(names[0], "Walking");
    assert_eq!(names[13], "Brushing teeth");

    let (_, schema) = call(&f.app, "GET", "/schema", None).await;
    assert_eq!(schema["window_seconds"], 4);
    assert_eq!(schema["variables"][0]["name"], "environment");
}

#[tokio::test]
async fn probe_returns_all_intermediates() {
    let f = fixture();
    let body = json!({"context": {"semantic-location": "Museum", "speed": "low"}, "k": 0.5});
    let (status, probe) = call(&f.app, "POST", "/probe", Some(body.clone())).await;
    assert_eq!(status, StatusCode::OK, "{probe}");
    assert!(probe["description"]
        .as_str()
        .unwrap()
        .starts_with("In the last 4 seconds the user Bob"));
    assert_eq!(probe["vector"].as_array().unwrap().len(), 14);
    assert!(probe["raw_response"]
        .as_str()
        .unwrap()
        .contains("Consistent activities: ["));
    assert_eq!(probe["prompt"][0]["role"], "system");
    assert_eq!(probe["cache_hit"], false);
    for s in probe["selected"].as_array().unwrap() {
        assert!(s["score"].as_f64().unwrap() > 0.5);
    }
    let (_, again) = call(&f.app, "POST", "/probe", Some(body)).await;
    assert_eq!(again["cache_hit"], true);
    assert_eq!(again["vector"], probe["vector"]);

    let dry = json!({"context": {"speed": "low"}, "k": 1.0, "dry_run": true});
    let (_, prepared) = call(&f.app, "POST", "/probe", Some(dry)).await;
    assert!(prepared["selected"].as_array().unwrap().is_empty());
    assert!(prepared.get("raw_response").is_none());
}

#[tokio::test]
async fn invalid_context_is_a_structured_400() {
    let f = fixture();
    let (status, body) = call(
        &f.app,
        "POST",
        "/probe",
        Some(json!({"context": {"speed": "warp"}})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["kind"], "invalid_request");
    assert!(body["error"]["message"].as_str().unwrap().contains("warp"));
}

#[tokio::test]
async fn pool_add_conflict_and_delete() {
    let f = fixture();
    let (_, pool) = call(&f.app, "GET", "/pool", None).await;
    let existing = pool[0].clone();
    assert_eq!(pool.as_array().unwrap().len(), 21);

    let (status, body) = call(&f.app, "POST", "/pool", Some(existing.clone())).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"]["kind"], "duplicate_id");

    let fresh = json!({
        "id": "bar-night",
        "context": {"semantic-location": "Bar", "environment": "indoor", "speed": "null"},
        "z": 4,
        "consistent": ["Sitting", "Standing"],
        "note": "a bar indoors"
    });
    let (status, _) = call(&f.app, "POST", "/pool", Some(fresh)).await;
    assert_eq!(status, StatusCode::CREATED);
    let on_disk = fs::read_to_string(f.dir.path().join("pool.jsonl")).unwrap();
    assert!(on_disk.contains("bar-night"));

    let sim =
        json!({"context": {"semantic-location": "Bar", "environment": "indoor", "speed": "null"}});
    let (_, scores) = call(&f.app, "POST", "/similarity", Some(sim)).await;
    let scores = scores["scores"].as_array().unwrap();
    assert_eq!(scores.len(), 22);
    let top = scores.iter().find(|s| s["id"] == "bar-night").unwrap();
    assert!(top["score"].as_f64().unwrap() > 0.999);

    let (status, removed) = call(&f.app, "DELETE", "/pool/bar-night", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(removed["id"], "bar-night");
    let (status, body) = call(&f.app, "DELETE", "/pool/bar-night", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"]["kind"], "unknown_id");

    let bad = json!({"id": "x", "context": {}, "z": 4, "consistent": ["Flying"]});
    let (status, _) = call(&f.app, "POST", "/pool", Some(bad)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn batch_writes_vectors_next_to_the_windows() {
    let f = fixture();
    let windows = f.dir.path().join("windows.jsonl");
    let lines: Vec<String> = (0..30)
        .map(|i| {
            let speed = ["null", "low", "high"][i % 3];
            json!({"window_id": format!("w{i}"), "user": "u1", "z": 4, "context": {"speed": speed}})
                .to_string()
        })
        .chain(["{broken".to_string()])
        .collect();
    fs::write(&windows, lines.join("\n")).unwrap();

    let (status, body) = call(
        &f.app,
        "POST",
        "/batch",
        Some(json!({"windows_ref": windows, "k": 0.25})),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["summary"]["windows"], 30);
    assert_eq!(body["summary"]["unique_contexts"], 3);
    assert_eq!(body["summary"]["backend_calls"], 3);
    assert_eq!(body["rejected"][0]["line"], 31);
    let out = fs::read_to_string(body["out"].as_str().unwrap()).unwrap();
    assert_eq!(out.lines().count(), 30);

    let (status, body) = call(
        &f.app,
        "POST",
        "/batch",
        Some(json!({"windows_ref": "/nonexistent.jsonl"})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["kind"], "io");
}

#[tokio::test]
async fn backend_failure_surfaces_as_502() {
    let dir = tempfile::tempdir().unwrap();
    for file in [
        "schema.json",
        "phrases.json",
        "template.json",
        "pool.jsonl",
        "rules.json",
    ] {
        fs::copy(
            data::data_dir().join("domino").join(file),
            dir.path().join(file),
        )
        .unwrap();
    }
    let mut cfg = RunConfig::for_dataset(dir.path());
    cfg.backend = contextgpt::pipeline::BackendKind::Http;
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    cfg.http.endpoint = format!("http://127.0.0.1:{port}/v1/chat/completions");
    cfg.http.retry = contextgpt::gateway::RetryPolicy::none();
    // blocking HTTP clients must be built and dropped off the async threads
    let pipeline = Arc::new(
        tokio::task::spawn_blocking(move || cfg.build().unwrap())
            .await
            .unwrap(),
    );
    let app = router(AppState {
        pipeline: pipeline.clone(),
        default_k: 0.5,
        max_in_flight: 1,
    });
    let (status, body) = call(
        &app,
        "POST",
        "/probe",
        Some(json!({"context": {"speed": "low"}})),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_GATEWAY);
    assert_eq!(body["error"]["kind"], "backend");
    drop(app);
    tokio::task::spawn_blocking(move || drop(pipeline))
        .await
        .unwrap();
}

#[tokio::test]
async fn browser_preflight_is_allowed() {
    let f = fixture();
    let request = Request::builder()
        .method("OPTIONS")
        .uri("/probe")
        .header("origin", "http://localhost:5173")
        .header("access-control-request-method", "POST")
        .body(Body::empty())
        .unwrap();
    let response = f.app.clone().oneshot(request).await.unwrap();
    assert!(response.status().is_success());
    assert!(response.headers().contains_key("access-control-allow-origin"));
}
