//! Session API for interactive nested diffusion.
//!
//! Commands are JSON over HTTP; predictions stream over a WebSocket at
//! `/sessions/{id}/events`. See `docs/api.md` for the request and response
//! bodies.

mod error;
mod store;

use std::future::Future;

use axum::body::Bytes;
use axum::extract::ws::{CloseFrame, Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use nestdiff_core::Condition;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use tokio::net::TcpListener;
use tokio::sync::broadcast::error::RecvError;

pub use error::ApiError;
pub use store::{
    AppState, CreateRequest, PlanSummary, PredictionEvent, ResultPayload, ServiceConfig, SessionDescriptor,
    SessionSlot, MAX_BRANCHES,
};

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(health))
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(describe).delete(remove))
        .route("/sessions/{id}/advance", post(advance))
        .route("/sessions/{id}/select", post(select))
        .route("/sessions/{id}/condition", post(edit_condition))
        .route("/sessions/{id}/result", get(result))
        .route("/sessions/{id}/events", get(events))
        .with_state(state)
}

/// Serves until `shutdown` resolves. Event logs are written through on
/// every mutation, so nothing is pending once this returns.
pub async fn serve<F>(listener: TcpListener, state: AppState, shutdown: F) -> std::io::Result<()>
where
    F: Future<Output = ()> + Send + 'static,
{
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("malformed body: {e}")))
}

async fn health() -> &'static str {
    "ok"
}

async fn create(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateRequest = parse(&body)?;
    let descriptor = state.create(req)?;
    Ok((StatusCode::CREATED, Json(descriptor)).into_response())
}

async fn describe(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionDescriptor>, ApiError> {
    Ok(Json(state.get(&id)?.descriptor()))
}

async fn remove(State(state): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    state.remove(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdvanceRequest {
    #[serde(default)]
    stride: Option<usize>,
}

async fn advance(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<SessionDescriptor>, ApiError> {
    let slot = state.get(&id)?;
    let req: AdvanceRequest = if body.is_empty() { AdvanceRequest::default() } else { parse(&body)? };
    Ok(Json(slot.mutate(move |s| s.advance(req.stride)).await?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SelectRequest {
    branch: usize,
}

async fn select(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<SessionDescriptor>, ApiError> {
    let slot = state.get(&id)?;
    let req: SelectRequest = parse(&body)?;
    Ok(Json(slot.mutate(move |s| s.select(req.branch).map(|_| Vec::new())).await?))
}

async fn edit_condition(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<SessionDescriptor>, ApiError> {
    let slot = state.get(&id)?;
    let condition: Condition = parse(&body)?;
    Ok(Json(slot.mutate(move |s| s.edit_condition(condition).map(|_| Vec::new())).await?))
}

async fn result(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<ResultPayload>, ApiError> {
    Ok(Json(state.get(&id)?.result()?))
}

async fn events(
    State(state): State<AppState>,
    Path(id): Path<String>,
    ws: WebSocketUpgrade,
) -> Result<Response, ApiError> {
    let (backlog, rx) = state.get(&id)?.subscribe();
    Ok(ws.on_upgrade(move |socket| stream_events(socket, backlog, rx)))
}

/// Close code sent when a subscriber falls too far behind; reconnecting
/// replays the full backlog.
const CLOSE_LAGGED: u16 = 4000;

async fn stream_events(
    mut socket: WebSocket,
    backlog: Vec<PredictionEvent>,
    mut rx: tokio::sync::broadcast::Receiver<PredictionEvent>,
) {
    for event in &backlog {
        if send_event(&mut socket, event).await.is_err() {
            return;
        }
    }
    loop {
        tokio::select! {
            next = rx.recv() => match next {
                Ok(event) => {
                    if send_event(&mut socket, &event).await.is_err() {
                        return;
                    }
                }
                Err(RecvError::Lagged(n)) => {
                    let frame = CloseFrame { code: CLOSE_LAGGED, reason: format!("lagged by {n} events").into() };
                    let _ = socket.send(Message::Close(Some(frame))).await;
                    return;
                }
                Err(RecvError::Closed) => {
                    let _ = socket.send(Message::Close(None)).await;
                    return;
                }
            },
            incoming = socket.recv() => match incoming {
                None | Some(Err(_)) | Some(Ok(Message::Close(_))) => return,
                Some(Ok(_)) => {}
            },
        }
    }
}

async fn send_event(socket: &mut WebSocket, event: &PredictionEvent) -> Result<(), axum::Error> {
    let text = serde_json::to_string(event).expect("events serialize");
    socket.send(Message::Text(text.into())).await
}
