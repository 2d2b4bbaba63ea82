//! JSON API over a run directory, plus optional static hosting for the
//! review UI.
//!
//! | method | path                         |                                   |
//! |--------|------------------------------|-----------------------------------|
//! | GET    | `/api/runs`                  | run summaries, newest first       |
//! | GET    | `/api/runs/{id}`             | full manifest                     |
//! | GET    | `/api/runs/{id}/candidates`  | candidates joined with scores     |
//! | GET    | `/api/images/{hash}.png`     | content-addressed PNG             |
//! | POST   | `/api/runs/{id}/selection`   | `{"candidate_ids": [...]}`        |

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use pipeline_core::composition::{ScaleFactors, Slot};
use pipeline_core::manifest::{RunManifest, RunStatus, RunStore, RunSummary};
use pipeline_core::quality::{Pattern, RubricScore};
use pipeline_core::PipelineError;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

#[derive(Clone)]
pub struct AppState {
    pub runs: Arc<RunStore>,
}

pub struct ApiError(PipelineError);

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            PipelineError::NotFound(_) => StatusCode::NOT_FOUND,
            PipelineError::InvalidInput(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            tracing::error!(error = %self.0, "request failed");
        }
        (status, Json(serde_json::json!({ "error": self.0.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs blocking store access off the async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> pipeline_core::Result<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(PipelineError::Manifest(format!("worker panicked: {e}"))))?
        .map_err(ApiError)
}

pub fn image_url(key: &str) -> String {
    format!("/api/images/{key}.png")
}

/// One candidate with its scores and variant placement, as shown on a
/// review card.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    pub candidate_id: String,
    pub variant_id: String,
    pub attempt: u32,
    pub seed: u64,
    pub image_url: String,
    pub position_slot: Option<Slot>,
    pub rotation_deg: Option<u32>,
    pub scale: Option<ScaleFactors>,
    pub rubric: Option<RubricScore>,
    pub gate: Option<u8>,
    pub matched_pattern: Option<Pattern>,
    pub aesthetic: Option<f64>,
    pub clip_score: Option<f64>,
    pub combined: Option<f64>,
    pub failures: Vec<String>,
    pub notes: Vec<String>,
    /// Position in the pipeline's ranked selection, if selected.
    pub rank: Option<usize>,
    pub human_selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateList {
    pub run_id: String,
    pub status: RunStatus,
    pub selected: Vec<String>,
    pub human_selection: Option<Vec<String>>,
    /// Selected candidates in rank order, then the rest by combined score.
    pub candidates: Vec<CandidateView>,
}

pub fn candidate_list(m: &RunManifest) -> CandidateList {
    let mut candidates: Vec<CandidateView> = m
        .candidates
        .iter()
        .map(|c| {
            let v = m.variant(&c.variant_id);
            let r = m.report(&c.candidate_id);
            CandidateView {
                candidate_id: c.candidate_id.clone(),
                variant_id: c.variant_id.clone(),
                attempt: c.attempt,
                seed: c.seed,
                image_url: image_url(&c.image),
                position_slot: v.map(|v| v.position_slot),
                rotation_deg: v.map(|v| v.rotation_deg),
                scale: v.map(|v| v.scale),
                rubric: r.map(|r| r.rubric),
                gate: r.map(|r| r.gate),
                matched_pattern: r.and_then(|r| r.matched_pattern),
                aesthetic: r.map(|r| r.aesthetic),
                clip_score: r.map(|r| r.clip_score),
                combined: r.map(|r| r.combined),
                failures: r.map(|r| r.failures.clone()).unwrap_or_default(),
                notes: c.notes.clone(),
                rank: m.selected.iter().position(|id| *id == c.candidate_id),
                human_selected: m
                    .human_selection
                    .as_ref()
                    .is_some_and(|h| h.contains(&c.candidate_id)),
            }
        })
        .collect();
    candidates.sort_by(|a, b| match (a.rank, b.rank) {
        (Some(x), Some(y)) => x.cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => b
            .combined
            .unwrap_or(f64::NEG_INFINITY)
            .total_cmp(&a.combined.unwrap_or(f64::NEG_INFINITY))
            .then_with(|| a.candidate_id.cmp(&b.candidate_id)),
    });
    CandidateList {
        run_id: m.run_id.clone(),
        status: m.status,
        selected: m.selected.clone(),
        human_selection: m.human_selection.clone(),
        candidates,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionRequest {
    pub candidate_ids: Vec<String>,
}

async fn list_runs(State(s): State<AppState>) -> ApiResult<Json<Vec<RunSummary>>> {
    Ok(Json(blocking(move || s.runs.list()).await?))
}

async fn get_run(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<RunManifest>> {
    Ok(Json(blocking(move || s.runs.load(&id)).await?))
}

async fn get_candidates(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<CandidateList>> {
    let m = blocking(move || s.runs.load(&id)).await?;
    Ok(Json(candidate_list(&m)))
}

async fn get_image(State(s): State<AppState>, Path(file): Path<String>) -> ApiResult<Response> {
    let Some(key) = file.strip_suffix(".png").map(str::to_string) else {
        return Err(PipelineError::NotFound(format!("image {file:?}")).into());
    };
    let bytes = blocking(move || {
        let path = s.runs.find_image(&key)?;
        std::fs::read(&path).map_err(|e| PipelineError::Io { path, source: e })
    })
    .await?;
    Ok((
        [
            (header::CONTENT_TYPE, "image/png"),
            // Content-addressed, so never stale.
            (header::CACHE_CONTROL, "public, max-age=31536000, immutable"),
        ],
        bytes,
    )
        .into_response())
}

async fn post_selection(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<SelectionRequest>,
) -> ApiResult<Json<RunManifest>> {
    Ok(Json(
        blocking(move || s.runs.record_human_selection(&id, &req.candidate_ids)).await?,
    ))
}

/// API routes, with `static_dir` (the built review UI) served for every
/// other path when given.
pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/runs", get(list_runs))
        .route("/api/runs/{id}", get(get_run))
        .route("/api/runs/{id}/candidates", get(get_candidates))
        .route("/api/runs/{id}/selection", post(post_selection))
        .route("/api/images/{file}", get(get_image))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Binds `addr` and serves until interrupted.
pub async fn serve(addr: SocketAddr, state: AppState, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "serving");
    axum::serve(listener, router(state, static_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
