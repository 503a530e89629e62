//! HTTP front end for [`SessionManager`].
//!
//! Routes:
//!
//! | method | path | body | reply |
//! |---|---|---|---|
//! | POST | `/sessions` | [`CreateSession`] | [`Frame`] |
//! | GET | `/sessions` | | session ids |
//! | GET | `/sessions/{id}/frame` | | [`Frame`] |
//! | GET | `/sessions/{id}/stream` | | server-sent [`Frame`]s |
//! | POST | `/sessions/{id}/actions` | [`SubmitAction`] | [`Frame`] |
//! | POST | `/sessions/{id}/confirm` | [`Confirm`] | [`Frame`] |
//! | POST | `/sessions/{id}/annotations` | [`Annotate`] | [`Frame`] |
//! | GET | `/sessions/{id}/review` | | [`ReplayFrame`] list |
//! | POST | `/sessions/{id}/fixes` | [`FixAnnotation`] | [`AnnotationRecord`] |
//! | POST | `/sessions/{id}/abandon` | | [`Frame`] |
//! | POST | `/export` | [`ExportRequest`] | dataset JSON lines |
//!
//! Errors come back as `{"error": kind, "message": text}` with a 4xx/5xx status.

use std::collections::HashMap;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use serde::{Deserialize, Serialize};
use teamcoach::io::dataset_to_jsonl;
use teamcoach::session::{AnnotationRecord, Frame, ReplayFrame, ServiceConfig, SessionConfig, SessionManager};
use teamcoach::Error;
use tokio::sync::broadcast;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CreateSession {
    pub domain: String,
    pub config: SessionConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SubmitAction {
    pub member: usize,
    pub action: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Confirm {
    pub member: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Annotate {
    pub member: usize,
    pub intent: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FixAnnotation {
    pub t: usize,
    pub member: usize,
    pub intent: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExportRequest {
    pub sessions: Vec<String>,
    #[serde(default)]
    pub member: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self.0 {
            Error::UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session"),
            Error::Rejected(_) => (StatusCode::CONFLICT, "rejected"),
            Error::Config(_) | Error::Domain(_) | Error::Dimension(_) | Error::Dataset(_) => {
                (StatusCode::BAD_REQUEST, "invalid_request")
            }
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        let message = match &self.0 {
            Error::Rejected(m) => m.clone(),
            e => e.to_string(),
        };
        (status, Json(ErrorBody { error: kind.into(), message })).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Shared state: the session manager plus one frame channel per session.
#[derive(Clone)]
pub struct AppState {
    manager: Arc<SessionManager>,
    channels: Arc<Mutex<HashMap<String, broadcast::Sender<Frame>>>>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        Self::with_manager(Arc::new(SessionManager::new(config)))
    }

    pub fn with_manager(manager: Arc<SessionManager>) -> Self {
        Self { manager, channels: Arc::default() }
    }

    pub fn manager(&self) -> &Arc<SessionManager> {
        &self.manager
    }

    fn sender(&self, id: &str) -> broadcast::Sender<Frame> {
        self.channels
            .lock()
            .expect("channel lock")
            .entry(id.to_string())
            .or_insert_with(|| broadcast::channel(64).0)
            .clone()
    }

    fn publish(&self, frame: &Frame) {
        // No subscribers is fine.
        let _ = self.sender(&frame.session_id).send(frame.clone());
    }

    /// Runs manager work off the async threads; building a value table can
    /// take seconds.
    async fn blocking<T: Send + 'static>(
        &self,
        f: impl FnOnce(&SessionManager) -> teamcoach::Result<T> + Send + 'static,
    ) -> Result<T, ApiError> {
        let m = self.manager.clone();
        tokio::task::spawn_blocking(move || f(&m))
            .await
            .map_err(|e| ApiError(Error::Config(format!("worker failed: {e}"))))?
            .map_err(ApiError)
    }

    async fn frame_op(
        &self,
        f: impl FnOnce(&SessionManager) -> teamcoach::Result<Frame> + Send + 'static,
    ) -> ApiResult<Frame> {
        let frame = self.blocking(f).await?;
        self.publish(&frame);
        Ok(Json(frame))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}/frame", get(frame))
        .route("/sessions/{id}/stream", get(stream_frames))
        .route("/sessions/{id}/actions", post(submit_action))
        .route("/sessions/{id}/confirm", post(confirm))
        .route("/sessions/{id}/annotations", post(annotate))
        .route("/sessions/{id}/review", get(review))
        .route("/sessions/{id}/fixes", post(fix_annotation))
        .route("/sessions/{id}/abandon", post(abandon))
        .route("/export", post(export_dataset))
        .with_state(state)
}

async fn create_session(State(st): State<AppState>, Json(req): Json<CreateSession>) -> ApiResult<Frame> {
    st.frame_op(move |m| m.create_session(&req.domain, req.config)).await
}

async fn list_sessions(State(st): State<AppState>) -> Json<Vec<String>> {
    Json(st.manager.session_ids())
}

async fn frame(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Frame> {
    Ok(Json(st.blocking(move |m| m.frame(&id)).await?))
}

/// Current frame first, then every frame produced by later requests.
async fn stream_frames(
    State(st): State<AppState>,
    Path(id): Path<String>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let rx = st.sender(&id).subscribe();
    let current = {
        let id = id.clone();
        st.blocking(move |m| m.frame(&id)).await?
    };
    let to_event = |f: &Frame| Event::default().event("frame").json_data(f).expect("frames serialize");
    let first = stream::once(std::future::ready(Ok(to_event(&current))));
    let rest = stream::unfold((rx, false), move |(mut rx, done)| async move {
        if done {
            return None;
        }
        loop {
            match rx.recv().await {
                Ok(f) => {
                    let finished = f.finished;
                    return Some((Ok(to_event(&f)), (rx, finished)));
                }
                Err(broadcast::error::RecvError::Lagged(n)) => log::warn!("frame stream lagged by {n}"),
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    let stream = if current.finished { first.boxed() } else { first.chain(rest).boxed() };
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

async fn submit_action(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<SubmitAction>,
) -> ApiResult<Frame> {
    st.frame_op(move |m| m.submit_action(&id, req.member, req.action)).await
}

async fn confirm(State(st): State<AppState>, Path(id): Path<String>, Json(req): Json<Confirm>) -> ApiResult<Frame> {
    st.frame_op(move |m| m.confirm_intervention(&id, req.member)).await
}

async fn annotate(State(st): State<AppState>, Path(id): Path<String>, Json(req): Json<Annotate>) -> ApiResult<Frame> {
    st.frame_op(move |m| m.annotate(&id, req.member, req.intent)).await
}

async fn review(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Vec<ReplayFrame>> {
    Ok(Json(st.blocking(move |m| m.review(&id)).await?))
}

async fn fix_annotation(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<FixAnnotation>,
) -> ApiResult<AnnotationRecord> {
    Ok(Json(st.blocking(move |m| m.fix_annotation(&id, req.t, req.member, req.intent)).await?))
}

async fn abandon(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Frame> {
    st.frame_op(move |m| {
        m.abandon(&id)?;
        m.frame(&id)
    })
    .await
}

async fn export_dataset(State(st): State<AppState>, Json(req): Json<ExportRequest>) -> Result<Response, ApiError> {
    let text = st
        .blocking(move |m| {
            let first = req.sessions.first().ok_or_else(|| Error::Config("no sessions to export".into()))?;
            let domain = m.frame(first)?.domain;
            for id in &req.sessions[1..] {
                if m.frame(id)?.domain != domain {
                    return Err(Error::Config("sessions come from different domains".into()));
                }
            }
            let ds = m.export_dataset(&req.sessions, req.member)?;
            dataset_to_jsonl(&domain.to_string(), &ds)
        })
        .await?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], text).into_response())
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(addr: SocketAddr, config: ServiceConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new(config))).await
}
