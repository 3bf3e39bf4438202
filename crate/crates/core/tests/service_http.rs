//! The annotation REST API driven through the router, without a socket.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use simstudent_core::clock::Clock;
use simstudent_core::gateway::{
    Backend, ChatMessage, Completion, EmbeddingVector, Gateway, GatewayError, GenConfig, StubBackend,
};
use simstudent_core::metrics::{mae, GradeScheme};
use simstudent_core::profile::{sample_profile, AttributeCatalog, StudentProfile};
use simstudent_core::scoring::PromptSet;
use simstudent_core::service::{
    router, AnnotationDump, AnnotationStore, ArtifactDir, ServiceConfig, ServiceState, StoreOptions,
};

const TOKEN: &str = "test-token";

struct Fixture {
    app: Router,
    profiles: Vec<StudentProfile>,
    candidates: Vec<String>,
}

fn fixture_with(gateway: Gateway, artifacts: Option<ArtifactDir>) -> Fixture {
    let catalog = AttributeCatalog::default();
    let profiles: Vec<StudentProfile> = (0..5).map(|s| sample_profile(s, &catalog).unwrap()).collect();
    let candidates = vec![profiles[0].id.clone(), profiles[1].id.clone()];
    let store = AnnotationStore::new(StoreOptions {
        profiles: &profiles,
        candidates: &candidates,
        catalog: &catalog,
        prompts: &PromptSet::default(),
        gateway,
        gen: GenConfig::default(),
        clock: Clock::fixed_epoch(),
        config: ServiceConfig::default(),
    })
    .unwrap();
    let app = router(ServiceState {
        store: Arc::new(store),
        token: Arc::from(TOKEN),
        artifacts,
    });
    Fixture {
        app,
        profiles,
        candidates,
    }
}

fn fixture() -> Fixture {
    fixture_with(Gateway::stub(StubBackend::new()), None)
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>, token: Option<&str>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
    }
    let req = match body {
        Some(b) => req
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()));
    (status, value)
}

async fn authed(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    call(app, method, uri, body, Some(TOKEN)).await
}

async fn open_session(app: &Router, candidate: &str, expert: &str) -> String {
    let (status, s) = authed(
        app,
        Method::POST,
        "/sessions",
        Some(json!({"candidate_id": candidate, "expert_id": expert})),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{s}");
    s["id"].as_str().unwrap().to_string()
}

async fn chat(app: &Router, session: &str, from: usize, turns: usize) {
    for t in from..from + turns {
        let (status, body) = authed(
            app,
            Method::POST,
            &format!("/sessions/{session}/turns"),
            Some(json!({"message": format!("advising question {t}")})),
        )
        .await;
        assert_eq!(status, StatusCode::OK, "{body}");
        assert_eq!(body["turn_count"], t + 1);
        assert!(!body["reply"].as_str().unwrap().is_empty());
    }
}

fn rating(score: i64) -> Value {
    json!({
        "score": score,
        "justification": "answers matched the stated major and habits",
        "agreements": [{"item": "behavior", "level": 4}],
    })
}

#[tokio::test]
async fn fifteen_turns_then_rating_of_87_exports_as_8_7() {
    let f = fixture();
    let cand = &f.candidates[0];
    let s = open_session(&f.app, cand, "expert-a").await;

    let (status, body) = authed(&f.app, Method::POST, &format!("/sessions/{s}/rating"), Some(rating(87))).await;
    assert_eq!(status, StatusCode::FORBIDDEN, "rating before any turn: {body}");

    chat(&f.app, &s, 0, 14).await;
    let (status, _) = authed(&f.app, Method::POST, &format!("/sessions/{s}/rating"), Some(rating(87))).await;
    assert_eq!(status, StatusCode::FORBIDDEN, "rating after 14 turns");

    chat(&f.app, &s, 14, 1).await;
    let (status, _) = authed(&f.app, Method::POST, &format!("/sessions/{s}/rating"), Some(rating(101))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, r) = authed(&f.app, Method::POST, &format!("/sessions/{s}/rating"), Some(rating(87))).await;
    assert_eq!(status, StatusCode::CREATED, "{r}");
    assert_eq!(r["normalized"], 8.7);
    assert_eq!(r["turns"], 15);

    let (status, _) = authed(
        &f.app,
        Method::POST,
        &format!("/sessions/{s}/turns"),
        Some(json!({"message": "one more"})),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (status, session) = authed(&f.app, Method::GET, &format!("/sessions/{s}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(session["status"], "rated");
    assert_eq!(session["transcript"]["turns"].as_array().unwrap().len(), 30);

    let (status, dump) = authed(&f.app, Method::GET, "/export", None).await;
    assert_eq!(status, StatusCode::OK);
    let dump: AnnotationDump = serde_json::from_value(dump).unwrap();
    assert_eq!(dump.ratings.len(), 1);
    assert_eq!(dump.ratings[0].normalized, 8.7);
    assert_eq!(dump.expert_means[cand], 8.7);

    let (status, lines) = authed(&f.app, Method::GET, "/export?format=jsonl", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(lines.as_str().unwrap().lines().count(), 2);
}

#[tokio::test]
async fn token_is_required_except_for_health() {
    let f = fixture();
    let (status, _) = call(&f.app, Method::GET, "/health", None, None).await;
    assert_eq!(status, StatusCode::OK);
    for token in [None, Some("wrong")] {
        let (status, body) = call(&f.app, Method::GET, "/candidates", None, token).await;
        assert_eq!(status, StatusCode::UNAUTHORIZED);
        assert_eq!(body["error"], "unauthorized");
        let (status, _) = call(&f.app, Method::GET, "/export", None, token).await;
        assert_eq!(status, StatusCode::UNAUTHORIZED);
    }
}

#[tokio::test]
async fn candidate_policy_and_not_found() {
    let f = fixture();
    let (status, list) = authed(&f.app, Method::GET, "/candidates?expert=expert-a", None).await;
    assert_eq!(status, StatusCode::OK);
    let ids: Vec<&str> = list.as_array().unwrap().iter().map(|c| c["id"].as_str().unwrap()).collect();
    assert_eq!(ids, f.candidates.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(list[0]["rated_by_me"], false);

    let outsider = &f.profiles[4].id;
    let (status, body) = authed(
        &f.app,
        Method::POST,
        "/sessions",
        Some(json!({"candidate_id": outsider, "expert_id": "e"})),
    )
    .await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    assert_eq!(body["error"], "policy");
    let (status, _) = authed(
        &f.app,
        Method::POST,
        "/sessions",
        Some(json!({"candidate_id": "p-0000000000000000", "expert_id": "e"})),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = authed(&f.app, Method::GET, "/sessions/s-99999", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn two_experts_rating_80_and_90_give_gold_8_5() {
    let f = fixture();
    let cand = &f.candidates[1];
    for (expert, score) in [("expert-a", 80), ("expert-b", 90)] {
        let s = open_session(&f.app, cand, expert).await;
        chat(&f.app, &s, 0, 15).await;
        let (status, _) = authed(&f.app, Method::POST, &format!("/sessions/{s}/rating"), Some(rating(score))).await;
        assert_eq!(status, StatusCode::CREATED);
    }
    let (_, list) = authed(&f.app, Method::GET, "/candidates?expert=expert-b", None).await;
    let entry = list.as_array().unwrap().iter().find(|c| c["id"] == json!(cand)).unwrap();
    assert_eq!(entry["ratings"], 2);
    assert_eq!(entry["rated_by_me"], true);

    let (_, raw) = authed(&f.app, Method::GET, "/export", None).await;
    let dump: AnnotationDump = serde_json::from_value(raw).unwrap();
    assert_eq!(dump.expert_means[cand], 8.5);

    // The export feeds metrics as is.
    let gold = dump.to_gold(8.0, &GradeScheme::default()).unwrap();
    let propagated = BTreeMap::from([(cand.clone(), 9.25)]);
    assert_eq!(mae(&propagated, &gold.expert_means).unwrap(), 0.75);
    assert!(gold.relevant.contains(cand));

    let empty = AnnotationDump {
        sessions: vec![],
        ratings: vec![],
        expert_means: BTreeMap::new(),
    };
    assert!(empty.to_gold(8.0, &GradeScheme::default()).is_err());
}

struct DownBackend;

impl Backend for DownBackend {
    fn name(&self) -> &str {
        "down"
    }

    fn chat(&self, _: &[ChatMessage], _: &GenConfig) -> Result<Completion, GatewayError> {
        Err(GatewayError::Transient {
            attempts: 3,
            message: "connection refused".into(),
        })
    }

    fn embed(&self, _: &str) -> Result<EmbeddingVector, GatewayError> {
        Err(GatewayError::Transient {
            attempts: 3,
            message: "connection refused".into(),
        })
    }
}

#[tokio::test]
async fn backend_failure_is_retriable_and_records_nothing() {
    let f = fixture_with(Gateway::new(Arc::new(DownBackend), 2), None);
    let s = open_session(&f.app, &f.candidates[0], "expert-a").await;
    let (status, body) = authed(
        &f.app,
        Method::POST,
        &format!("/sessions/{s}/turns"),
        Some(json!({"message": "hello"})),
    )
    .await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(body["error"], "backend_retriable");
    let (_, session) = authed(&f.app, Method::GET, &format!("/sessions/{s}"), None).await;
    assert!(session["transcript"]["turns"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn artifacts_are_served_from_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("candidates.json"), r#"{"ids": ["p-1"]}"#).unwrap();
    std::fs::write(dir.path().join("scores_initial.jsonl"), "{\"a\":1}\n{\"a\":2}\n").unwrap();
    let f = fixture_with(
        Gateway::stub(StubBackend::new()),
        Some(ArtifactDir(dir.path().to_path_buf())),
    );
    let (status, body) = authed(&f.app, Method::GET, "/artifacts/candidates", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["ids"][0], "p-1");
    let (status, body) = authed(&f.app, Method::GET, "/artifacts/scores-initial", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body.as_array().unwrap().len(), 2);
    let (status, _) = authed(&f.app, Method::GET, "/artifacts/report", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = authed(&f.app, Method::GET, "/artifacts/..%2Fetc", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}
