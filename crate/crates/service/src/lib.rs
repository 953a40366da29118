//! HTTP front end for an interactive segmentation session.
//!
//! Endpoints:
//! - `GET /info`: dims, spacing, per-stage status, record counts.
//! - `GET /slice/{axis}/{index}?window=c,w&overlay=stage`: PNG.
//! - `POST /scribbles`, `POST /seeds`: JSON records, idempotent per record.
//! - `POST /run/{stage}`: starts a background job, returns `{"job": id}`.
//! - `GET /progress/{job}`: status and completed fraction.
//! - `GET /labels/{stage}.mvol`: the stage's label volume.

pub mod session;

use std::net::SocketAddr;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use segd_core::pipeline::Stage;
use segd_core::{SegError, SliceAxis};
use serde::Deserialize;
use serde_json::json;

pub use session::{ServiceError, Session};
use session::{ScribblePost, SeedPost};

pub const DEFAULT_PORT: u16 = 8707;

/// Shared session; the mutex is the single-writer gate for all mutation.
#[derive(Clone)]
pub struct AppState {
    session: Arc<Mutex<Session>>,
}

impl AppState {
    pub fn new(session: Session) -> Self {
        AppState { session: Arc::new(Mutex::new(session)) }
    }

    pub fn lock(&self) -> MutexGuard<'_, Session> {
        self.session.lock().unwrap_or_else(|p| p.into_inner())
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let code = match &self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Prerequisite(_) => StatusCode::PRECONDITION_FAILED,
            ServiceError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Core(SegError::Range { .. }) => StatusCode::NOT_FOUND,
            ServiceError::Core(SegError::InvalidArgument(_) | SegError::Format(_)) => StatusCode::BAD_REQUEST,
            ServiceError::Core(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (code, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<T, ServiceError>;

fn parse_stage(s: &str) -> ApiResult<Stage> {
    s.parse().map_err(|_| ServiceError::NotFound(format!("unknown stage '{s}'")))
}

#[derive(Debug, Default, Deserialize)]
pub struct SliceQuery {
    pub window: Option<String>,
    pub overlay: Option<String>,
}

fn parse_window(s: &str) -> ApiResult<(f64, f64)> {
    let bad = || ServiceError::BadRequest(format!("window must be center,width: '{s}'"));
    let (c, w) = s.split_once(',').ok_or_else(bad)?;
    let c: f64 = c.trim().parse().map_err(|_| bad())?;
    let w: f64 = w.trim().parse().map_err(|_| bad())?;
    if !(w > 0.0 && w.is_finite() && c.is_finite()) {
        return Err(bad());
    }
    Ok((c, w))
}

async fn info(State(st): State<AppState>) -> impl IntoResponse {
    Json(st.lock().info())
}

async fn slice(
    State(st): State<AppState>,
    Path((axis, index)): Path<(String, usize)>,
    Query(q): Query<SliceQuery>,
) -> ApiResult<Response> {
    let axis: SliceAxis = axis.parse().map_err(|e: SegError| ServiceError::NotFound(e.to_string()))?;
    let window = q.window.as_deref().map(parse_window).transpose()?;
    let overlay = q.overlay.as_deref().map(parse_stage).transpose()?;
    let png = st.lock().slice_png(axis, index, window, overlay)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn scribbles(State(st): State<AppState>, Json(body): Json<ScribblePost>) -> ApiResult<impl IntoResponse> {
    Ok(Json(st.lock().add_scribbles(&body)?))
}

async fn seeds(State(st): State<AppState>, Json(body): Json<SeedPost>) -> ApiResult<impl IntoResponse> {
    Ok(Json(st.lock().add_seeds(&body)?))
}

async fn run(State(st): State<AppState>, Path(stage): Path<String>) -> ApiResult<impl IntoResponse> {
    let stage = parse_stage(&stage)?;
    let ticket = st.lock().begin_run(stage)?;
    let job = ticket.job;
    let worker = st.clone();
    tokio::task::spawn_blocking(move || {
        let result = ticket.execute();
        worker.lock().finish_run(&ticket, result);
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "job": job, "stage": stage.name() }))))
}

async fn progress(State(st): State<AppState>, Path(job): Path<u64>) -> ApiResult<impl IntoResponse> {
    st.lock().job(job).map(Json).ok_or_else(|| ServiceError::NotFound(format!("no job {job}")))
}

async fn labels(State(st): State<AppState>, Path(file): Path<String>) -> ApiResult<Response> {
    let name = file
        .strip_suffix(".mvol")
        .ok_or_else(|| ServiceError::NotFound(format!("expected <stage>.mvol, got '{file}'")))?;
    let bytes = st.lock().labels_mvol(parse_stage(name)?)?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/info", get(info))
        .route("/slice/{axis}/{index}", get(slice))
        .route("/scribbles", post(scribbles))
        .route("/seeds", post(seeds))
        .route("/run/{stage}", post(run))
        .route("/progress/{job}", get(progress))
        .route("/labels/{file}", get(labels))
        .with_state(state)
}

/// Serves the session on `127.0.0.1:port` until the process stops.
pub async fn serve(session: Session, port: u16) -> std::io::Result<()> {
    let addr = SocketAddr::from(([127, 0, 0, 1], port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("serving {} on http://{addr}", session.dir().display());
    axum::serve(listener, router(AppState::new(session))).await
}
