//! REST surface of the annotation store.
//!
//! | method | path                     | body              |
//! |--------|--------------------------|-------------------|
//! | GET    | /health                  |                   |
//! | GET    | /candidates?expert=ID    |                   |
//! | POST   | /sessions                | `{candidate_id, expert_id}` |
//! | GET    | /sessions/{id}           |                   |
//! | POST   | /sessions/{id}/turns     | `{message}`       |
//! | POST   | /sessions/{id}/rating    | `{score, justification, agreements}` |
//! | GET    | /export?format=json\|jsonl |                 |
//! | GET    | /artifacts/{name}        |                   |
//!
//! Every route except `/health` requires `Authorization: Bearer <token>`.

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{AnnotationStore, RatingRecord, RatingRequest, ServiceError, Session, SessionStatus};
use crate::profile::StudentProfile;

/// Run directory whose artifacts are served read-only.
#[derive(Debug, Clone)]
pub struct ArtifactDir(pub PathBuf);

const ARTIFACTS: [(&str, &str); 6] = [
    ("profiles", "profiles.jsonl"),
    ("scores-initial", "scores_initial.jsonl"),
    ("scores-propagated", "scores_propagated.jsonl"),
    ("candidates", "candidates.json"),
    ("graph", "graph.json"),
    ("report", "report.json"),
];

#[derive(Clone)]
pub struct ServiceState {
    pub store: Arc<AnnotationStore>,
    pub token: Arc<str>,
    pub artifacts: Option<ArtifactDir>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub kind: &'static str,
    pub message: String,
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let (status, kind) = match &e {
            ServiceError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            ServiceError::Policy(_) => (StatusCode::FORBIDDEN, "policy"),
            ServiceError::State(_) => (StatusCode::CONFLICT, "state"),
            ServiceError::Input(_) => (StatusCode::UNPROCESSABLE_ENTITY, "input"),
            ServiceError::Backend(_) => (StatusCode::SERVICE_UNAVAILABLE, "backend_retriable"),
            ServiceError::Log(_) => (StatusCode::INTERNAL_SERVER_ERROR, "storage"),
        };
        ApiError {
            status,
            kind,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(serde_json::json!({"error": self.kind, "message": self.message})),
        )
            .into_response()
    }
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        kind: "internal",
        message: e.to_string(),
    }
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(internal)?
        .map_err(ApiError::from)
}

async fn require_token(State(state): State<ServiceState>, req: Request, next: Next) -> Response {
    let presented = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if presented == Some(&*state.token) {
        next.run(req).await
    } else {
        ApiError {
            status: StatusCode::UNAUTHORIZED,
            kind: "unauthorized",
            message: "missing or wrong bearer token".into(),
        }
        .into_response()
    }
}

pub fn router(state: ServiceState) -> Router {
    let protected = Router::new()
        .route("/candidates", get(list_candidates))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/turns", post(post_turn))
        .route("/sessions/{id}/rating", post(submit_rating))
        .route("/export", get(export))
        .route("/artifacts/{name}", get(artifact))
        .layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .merge(protected)
        .with_state(state)
}

#[derive(Debug, Deserialize)]
struct CandidateQuery {
    expert: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CandidateView {
    pub id: String,
    pub profile: StudentProfile,
    pub sessions: usize,
    pub ratings: usize,
    /// Whether the querying expert has already rated this agent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rated_by_me: Option<bool>,
}

async fn list_candidates(
    State(state): State<ServiceState>,
    Query(q): Query<CandidateQuery>,
) -> Result<Json<Vec<CandidateView>>, ApiError> {
    let store = Arc::clone(&state.store);
    let views = blocking(move || {
        let sessions = store.sessions()?;
        Ok(store
            .candidate_ids()
            .into_iter()
            .map(|id| {
                let mine = sessions.iter().filter(|s| s.candidate_id == id);
                let rated = sessions
                    .iter()
                    .filter(|s| s.candidate_id == id && s.status == SessionStatus::Rated);
                CandidateView {
                    profile: store.profile(&id).cloned().expect("candidate has a profile"),
                    sessions: mine.count(),
                    ratings: rated.clone().count(),
                    rated_by_me: q
                        .expert
                        .as_ref()
                        .map(|e| rated.clone().any(|s| &s.expert_id == e)),
                    id,
                }
            })
            .collect())
    })
    .await?;
    Ok(Json(views))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateSession {
    pub candidate_id: String,
    pub expert_id: String,
}

async fn create_session(
    State(state): State<ServiceState>,
    Json(body): Json<CreateSession>,
) -> Result<(StatusCode, Json<Session>), ApiError> {
    let store = Arc::clone(&state.store);
    let s = blocking(move || store.create_session(&body.candidate_id, &body.expert_id)).await?;
    Ok((StatusCode::CREATED, Json(s)))
}

async fn get_session(
    State(state): State<ServiceState>,
    Path(id): Path<String>,
) -> Result<Json<Session>, ApiError> {
    let store = Arc::clone(&state.store);
    Ok(Json(blocking(move || store.session(&id)).await?))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TurnRequest {
    pub message: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TurnResponse {
    pub reply: String,
    pub turn_count: usize,
    pub min_turns: usize,
    pub session: Session,
}

async fn post_turn(
    State(state): State<ServiceState>,
    Path(id): Path<String>,
    Json(body): Json<TurnRequest>,
) -> Result<Json<TurnResponse>, ApiError> {
    let store = Arc::clone(&state.store);
    let min_turns = store.config().min_turns;
    let (reply, session) = blocking(move || store.post_turn(&id, &body.message)).await?;
    Ok(Json(TurnResponse {
        reply,
        turn_count: session.turn_count(),
        min_turns,
        session,
    }))
}

async fn submit_rating(
    State(state): State<ServiceState>,
    Path(id): Path<String>,
    Json(body): Json<RatingRequest>,
) -> Result<(StatusCode, Json<RatingRecord>), ApiError> {
    let store = Arc::clone(&state.store);
    let r = blocking(move || store.submit_rating(&id, body)).await?;
    Ok((StatusCode::CREATED, Json(r)))
}

#[derive(Debug, Deserialize)]
struct ExportQuery {
    format: Option<String>,
}

async fn export(State(state): State<ServiceState>, Query(q): Query<ExportQuery>) -> Result<Response, ApiError> {
    let store = Arc::clone(&state.store);
    let dump = blocking(move || store.export()).await?;
    match q.format.as_deref() {
        None | Some("json") => Ok(Json(dump).into_response()),
        Some("jsonl") => Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], dump.to_jsonl()).into_response()),
        Some(other) => Err(ServiceError::Input(format!("unknown export format '{other}'")).into()),
    }
}

async fn artifact(State(state): State<ServiceState>, Path(name): Path<String>) -> Result<Json<Value>, ApiError> {
    let dir = state
        .artifacts
        .clone()
        .ok_or_else(|| ServiceError::NotFound("no run directory configured".into()))?;
    let file = ARTIFACTS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, f)| *f)
        .ok_or_else(|| ServiceError::NotFound(format!("artifact {name}")))?;
    let value = blocking(move || {
        let path = dir.0.join(file);
        let raw = std::fs::read_to_string(&path).map_err(|_| ServiceError::NotFound(format!("artifact {file}")))?;
        let parsed = if file.ends_with(".jsonl") {
            raw.lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str)
                .collect::<Result<Vec<Value>, _>>()
                .map(Value::Array)
        } else {
            serde_json::from_str(&raw)
        };
        parsed.map_err(|e| ServiceError::Log(format!("{file}: {e}")))
    })
    .await?;
    Ok(Json(value))
}
