use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path, RawQuery, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;
use tactile::init::Rating;

use crate::error::{Result, ServiceError};
use crate::manager::{CreateRequest, SessionManager};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        if status.is_server_error() {
            tracing::error!(error = %self, "request failed");
        }
        (status, Json(json!({ "error": self.to_string(), "status": status.as_u16() }))).into_response()
    }
}

type Shared = Arc<SessionManager>;

fn wav(bytes: impl Into<Vec<u8>>) -> Response {
    ([(header::CONTENT_TYPE, "audio/wav")], bytes.into()).into_response()
}

/// Empty bodies read as `{}`.
fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T> {
    let body: &[u8] = if body.iter().all(u8::is_ascii_whitespace) { b"{}" } else { body };
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(format!("invalid body: {e}")))
}

/// Runs model work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> Result<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ServiceError::Corrupt(format!("worker panicked: {e}")))?
}

async fn health(State(m): State<Shared>) -> Response {
    Json(json!({
        "status": "ok",
        "checkpoint": m.checkpoint_hash(),
        "latent_dim": m.model().latent_dim(),
        "classes": m.model().class_names,
        "sessions": m.session_count(),
    }))
    .into_response()
}

async fn targets(State(m): State<Shared>) -> Response {
    Json(m.targets()).into_response()
}

async fn create(State(m): State<Shared>, body: Bytes) -> Result<Response> {
    let req: CreateRequest = parse(&body)?;
    let reply = blocking(move || m.create(req)).await?;
    Ok((StatusCode::CREATED, Json(reply)).into_response())
}

async fn state(State(m): State<Shared>, Path(id): Path<String>) -> Result<Response> {
    Ok(Json(blocking(move || m.state(&id)).await?).into_response())
}

async fn target_wav(State(m): State<Shared>, Path(id): Path<String>) -> Result<Response> {
    Ok(wav(m.target_wav(&id)?))
}

async fn candidate_wav(State(m): State<Shared>, Path(id): Path<String>) -> Result<Response> {
    let bytes = blocking(move || m.candidate_wav(&id)).await?;
    Ok(wav(bytes.as_ref().clone()))
}

fn query_w(query: Option<String>) -> Result<f64> {
    let query = query.unwrap_or_default();
    let raw = query
        .split('&')
        .filter_map(|kv| kv.split_once('='))
        .find(|(k, _)| *k == "w")
        .map(|(_, v)| v)
        .ok_or_else(|| ServiceError::BadRequest("missing query parameter w".into()))?;
    raw.parse::<f64>()
        .ok()
        .filter(|w| w.is_finite())
        .ok_or_else(|| ServiceError::BadRequest(format!("w must be a number, got {raw:?}")))
}

async fn slider_wav(State(m): State<Shared>, Path(id): Path<String>, RawQuery(q): RawQuery) -> Result<Response> {
    let w = query_w(q)?;
    let bytes = blocking(move || m.slider_wav(&id, w)).await?;
    Ok(wav(bytes.as_ref().clone()))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RateBody {
    rating: String,
}

async fn rate(State(m): State<Shared>, Path(id): Path<String>, body: Bytes) -> Result<Response> {
    let b: RateBody = parse(&body)?;
    let rating: Rating = b.rating.parse().map_err(|e: tactile::init::InitError| ServiceError::BadRequest(e.to_string()))?;
    Ok(Json(blocking(move || m.rate(&id, rating)).await?).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CommitBody {
    w: f64,
}

async fn commit(State(m): State<Shared>, Path(id): Path<String>, body: Bytes) -> Result<Response> {
    let b: CommitBody = parse(&body)?;
    Ok(Json(blocking(move || m.commit(&id, b.w)).await?).into_response())
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SaveBody {
    #[serde(default)]
    finish: bool,
}

async fn save(State(m): State<Shared>, Path(id): Path<String>, body: Bytes) -> Result<Response> {
    let b: SaveBody = parse(&body)?;
    let a = blocking(move || m.save(&id, b.finish)).await?;
    Ok(Json(json!({ "artifact_id": a.id, "iteration": a.iteration })).into_response())
}

async fn restart(State(m): State<Shared>, Path(id): Path<String>) -> Result<Response> {
    Ok(Json(blocking(move || m.restart(&id)).await?).into_response())
}

async fn abandon(State(m): State<Shared>, Path(id): Path<String>) -> Result<Response> {
    Ok(Json(blocking(move || m.abandon(&id)).await?).into_response())
}

async fn artifact(State(m): State<Shared>, Path(id): Path<String>) -> Result<Response> {
    Ok(Json(m.artifact(&id)?).into_response())
}

async fn artifact_wav(State(m): State<Shared>, Path(id): Path<String>) -> Result<Response> {
    Ok(wav(m.artifact_wav(&id)?))
}

async fn request_log(req: Request, next: Next) -> Response {
    let (method, path) = (req.method().clone(), req.uri().path().to_owned());
    let start = Instant::now();
    let resp = next.run(req).await;
    tracing::info!(
        method = %method,
        path = %path,
        status = resp.status().as_u16(),
        ms = start.elapsed().as_secs_f64() * 1e3,
        "request"
    );
    resp
}

pub fn router(manager: Shared) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/targets", get(targets))
        .route("/sessions", post(create))
        .route("/sessions/{id}/state", get(state))
        .route("/sessions/{id}/target.wav", get(target_wav))
        .route("/sessions/{id}/candidate.wav", get(candidate_wav))
        .route("/sessions/{id}/slider.wav", get(slider_wav))
        .route("/sessions/{id}/rate", post(rate))
        .route("/sessions/{id}/commit", post(commit))
        .route("/sessions/{id}/save", post(save))
        .route("/sessions/{id}/restart", post(restart))
        .route("/sessions/{id}/abandon", post(abandon))
        .route("/artifacts/{id}", get(artifact))
        .route("/artifacts/{id}/audio.wav", get(artifact_wav))
        .layer(middleware::from_fn(request_log))
        .with_state(manager)
}

/// Serves until the process is stopped.
pub async fn serve(manager: SessionManager) -> std::io::Result<()> {
    let bind = manager.config().bind.clone();
    let listener = tokio::net::TcpListener::bind(&bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(Arc::new(manager))).await
}
