//! The `/v1` HTTP API over one project directory.
//!
//! Reads run concurrently; mutations go through a single writer lock.
//! Blocking pipeline work runs on the blocking pool and reports progress
//! through the event log.

use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use mangaflow::gateway::ModelGateway;
use mangaflow::layout::Layout;
use mangaflow::lettering::TextElement;
use mangaflow::pipeline::{ErrorKind, PipelineError, Project};

use crate::Backend;

/// Longest accepted long-poll wait.
pub const MAX_POLL_MS: u64 = 60_000;
const DEFAULT_POLL_MS: u64 = 25_000;

pub struct AppState {
    pub project: Project,
    pub gateway: Arc<ModelGateway>,
    pub backend: Backend,
    writer: Mutex<()>,
}

impl AppState {
    pub fn new(project: Project, gateway: Arc<ModelGateway>, backend: Backend) -> Self {
        Self {
            project,
            gateway,
            backend,
            writer: Mutex::new(()),
        }
    }
}

type Shared = Arc<AppState>;

/// Error body: `{"error": {"stage", "kind", "message"}}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    error: PipelineError,
}

impl ApiError {
    fn not_found(stage: &str, message: impl ToString) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            error: PipelineError::validation(stage, message),
        }
    }

    fn invalid(stage: &str, message: impl ToString) -> Self {
        PipelineError::validation(stage, message).into()
    }
}

impl From<PipelineError> for ApiError {
    fn from(error: PipelineError) -> Self {
        let status = match error.kind {
            ErrorKind::Validation => StatusCode::UNPROCESSABLE_ENTITY,
            ErrorKind::Gateway => StatusCode::BAD_GATEWAY,
            ErrorKind::Io => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self { status, error }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": {
            "stage": self.error.stage,
            "kind": self.error.kind,
            "message": self.error.message,
        }});
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn page_in_range(s: &AppState, i: usize) -> ApiResult<()> {
    if i >= s.project.config.page_count {
        return Err(ApiError::not_found("page", format!("no page {i}")));
    }
    Ok(())
}

async fn blocking<T: Send + 'static>(
    s: Shared,
    f: impl FnOnce(&AppState) -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(move || f(&s))
        .await
        .map_err(|e| ApiError::from(PipelineError::new("server", ErrorKind::Io, e)))?
}

/// Runs `f` holding the writer lock.
async fn mutate<T: Send + 'static>(
    s: Shared,
    f: impl FnOnce(&AppState) -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    blocking(s, move |s| {
        let _guard = s.writer.lock().unwrap_or_else(|p| p.into_inner());
        f(s)
    })
    .await
}

fn parse<T: serde::de::DeserializeOwned>(stage: &str, body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::invalid(stage, format!("malformed body: {e}")))
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/v1/project", get(get_project))
        .route("/v1/pages/:i/image", get(get_image))
        .route("/v1/pages/:i/layout", get(get_layout).put(put_layout))
        .route("/v1/pages/:i/letters", get(get_letters).put(put_letters))
        .route("/v1/pages/:i/panels/:panel/rerender", post(rerender))
        .route("/v1/pages/:i/recompose", post(recompose))
        .route("/v1/events", get(events))
        .with_state(state)
}

async fn get_project(State(s): State<Shared>) -> ApiResult<Response> {
    blocking(s, |s| Ok(Json(s.project.state()).into_response())).await
}

async fn get_image(State(s): State<Shared>, Path(i): Path<usize>) -> ApiResult<Response> {
    blocking(s, move |s| {
        page_in_range(s, i)?;
        let paths = &s.project.paths;
        let bytes = std::fs::read(paths.page(i))
            .or_else(|_| std::fs::read(paths.raw_page(i)))
            .map_err(|_| ApiError::not_found("compose", format!("page {i} has no image yet")))?;
        Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
    })
    .await
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LayoutResponse {
    pub version: u64,
    pub page_version: u64,
    pub source: Option<mangaflow::layout::LayoutSource>,
    pub layout: Layout,
    pub flags: mangaflow::pipeline::StageFlags,
}

fn layout_response(s: &AppState, i: usize) -> ApiResult<LayoutResponse> {
    let state = s.project.state();
    let page = state.pages.into_iter().nth(i).expect("page in range");
    let layout = page
        .layout
        .ok_or_else(|| ApiError::not_found("layout", format!("page {i} has no layout yet")))?;
    Ok(LayoutResponse {
        version: state.version,
        page_version: page.version,
        source: page.layout_source,
        layout,
        flags: page.flags,
    })
}

async fn get_layout(State(s): State<Shared>, Path(i): Path<usize>) -> ApiResult<Json<LayoutResponse>> {
    blocking(s, move |s| {
        page_in_range(s, i)?;
        layout_response(s, i).map(Json)
    })
    .await
}

#[derive(Deserialize)]
#[serde(untagged)]
enum LayoutBody {
    Wrapped { layout: Layout },
    Bare(Layout),
}

/// Projects the submitted layout; the response carries the projected result.
async fn put_layout(State(s): State<Shared>, Path(i): Path<usize>, body: Bytes) -> ApiResult<Json<LayoutResponse>> {
    mutate(s, move |s| {
        page_in_range(s, i)?;
        let layout = match parse::<LayoutBody>("layout", &body)? {
            LayoutBody::Wrapped { layout } | LayoutBody::Bare(layout) => layout,
        };
        s.project.put_layout(i, &layout)?;
        layout_response(s, i).map(Json)
    })
    .await
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LettersResponse {
    pub version: u64,
    pub page_version: u64,
    pub elements: Vec<TextElement>,
    pub flags: Vec<String>,
}

async fn get_letters(State(s): State<Shared>, Path(i): Path<usize>) -> ApiResult<Json<LettersResponse>> {
    blocking(s, move |s| {
        page_in_range(s, i)?;
        let state = s.project.state();
        let page = &state.pages[i];
        Ok(Json(LettersResponse {
            version: state.version,
            page_version: page.version,
            elements: page.elements.clone(),
            flags: page.artifact.as_ref().map(|a| a.flags.clone()).unwrap_or_default(),
        }))
    })
    .await
}

#[derive(Deserialize)]
#[serde(untagged)]
enum LettersBody {
    Wrapped { elements: Vec<TextElement> },
    Bare(Vec<TextElement>),
}

async fn put_letters(State(s): State<Shared>, Path(i): Path<usize>, body: Bytes) -> ApiResult<Json<LettersResponse>> {
    mutate(s, move |s| {
        page_in_range(s, i)?;
        let elements = match parse::<LettersBody>("letter", &body)? {
            LettersBody::Wrapped { elements } | LettersBody::Bare(elements) => elements,
        };
        let (page, version) = s.project.put_letters(i, &elements, &s.gateway)?;
        Ok(Json(LettersResponse {
            version,
            page_version: s.project.stage_state().page_versions.get(&i).copied().unwrap_or(0),
            elements: page.elements,
            flags: page.flags,
        }))
    })
    .await
}

async fn rerender(State(s): State<Shared>, Path((i, panel)): Path<(usize, String)>) -> ApiResult<Response> {
    mutate(s, move |s| {
        page_in_range(s, i)?;
        let (asset, version) = s.project.rerender(i, &panel, &s.gateway, &s.backend)?;
        Ok(Json(json!({ "version": version, "asset": asset })).into_response())
    })
    .await
}

async fn recompose(State(s): State<Shared>, Path(i): Path<usize>) -> ApiResult<Response> {
    mutate(s, move |s| {
        page_in_range(s, i)?;
        let (page, version) = s.project.recompose(i, &s.gateway, &s.backend)?;
        Ok(Json(json!({ "version": version, "page": page })).into_response())
    })
    .await
}

#[derive(Deserialize)]
struct EventQuery {
    #[serde(default)]
    since: u64,
    timeout_ms: Option<u64>,
}

/// Events after `since`; waits up to `timeout_ms` when there are none.
async fn events(State(s): State<Shared>, Query(q): Query<EventQuery>) -> ApiResult<Response> {
    let wait = Duration::from_millis(q.timeout_ms.unwrap_or(DEFAULT_POLL_MS).min(MAX_POLL_MS));
    blocking(s, move |s| {
        let events = s.project.events.wait_since(q.since, wait);
        let last = events.last().map_or(q.since, |e| e.seq);
        Ok(Json(json!({ "events": events, "last": last })).into_response())
    })
    .await
}
