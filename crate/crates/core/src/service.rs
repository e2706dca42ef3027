//! HTTP service for physician adjudication: the escalation queue, case
//! bundles, verdicts, concept scores and workflow metrics.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::consultation::{compute_workflow_metrics, WorkflowMetrics};
use crate::matching::{normalize, MatchRuleSet};
use crate::model::{PatientCase, Verdict};
use crate::store::{summarize_scores, ConceptScore, QueueEntry, QueueOpinion, ScoreReport, Store, StoreError};

pub const BIND_ENV: &str = "MACD_BIND";
pub const DEFAULT_BIND: &str = "127.0.0.1:8080";

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<Store>,
    pub rules: Arc<MatchRuleSet>,
}

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    Conflict(String),
    Unprocessable(String),
    Internal(String),
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(m) => ApiError::NotFound(m),
            StoreError::AlreadyAdjudicated(id) => ApiError::Conflict(format!("case {id} is already adjudicated")),
            StoreError::Invalid(m) => ApiError::Unprocessable(m),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, message) = match self {
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, m),
            ApiError::Conflict(m) => (StatusCode::CONFLICT, m),
            ApiError::Unprocessable(m) => (StatusCode::UNPROCESSABLE_ENTITY, m),
            ApiError::Internal(m) => {
                tracing::error!(error = %m, "request failed");
                (StatusCode::INTERNAL_SERVER_ERROR, m)
            }
        };
        (status, Json(serde_json::json!({ "error": message }))).into_response()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueStatus {
    Pending,
    Adjudicated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueSummary {
    pub case_id: String,
    pub status: QueueStatus,
    pub enqueued_at: DateTime<Utc>,
    pub opinion_count: usize,
}

/// Everything a reviewer sees for one case. Carries no ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueItem {
    pub case_id: String,
    pub case: PatientCase,
    pub opinions: Vec<QueueOpinion>,
    pub enqueued_at: DateTime<Utc>,
    pub status: QueueStatus,
}

#[derive(Debug, Deserialize)]
pub struct Page {
    pub page: Option<usize>,
    pub page_size: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerdictRequest {
    pub case_id: String,
    pub physician_id: String,
    pub diagnosis_text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConceptScoreRequest {
    pub concept_id: String,
    pub physician_id: String,
    pub score: i64,
}

#[derive(Debug, Deserialize)]
pub struct MetricsQuery {
    pub run_id: Option<String>,
}

pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let mut app = Router::new()
        .route("/queue", get(queue))
        .route("/case/{id}", get(case))
        .route("/verdict", post(verdict))
        .route("/concept-score", post(concept_score))
        .route("/concept-scores", get(concept_scores))
        .route("/metrics", get(metrics))
        .with_state(state);
    if let Some(dir) = static_dir.filter(|d| d.is_dir()) {
        app = app.nest_service("/app", ServeDir::new(dir));
    }
    app
}

/// Listen address from `MACD_BIND`, else the default.
pub fn bind_address() -> Result<SocketAddr, String> {
    let raw = std::env::var(BIND_ENV).unwrap_or_else(|_| DEFAULT_BIND.to_string());
    raw.parse().map_err(|e| format!("{BIND_ENV}={raw}: {e}"))
}

pub async fn serve(state: AppState, addr: SocketAddr, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "adjudication service listening");
    axum::serve(listener, router(state, static_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

fn status_of(entry: &QueueEntry, verdicts: &std::collections::BTreeMap<String, Verdict>) -> QueueStatus {
    if verdicts.contains_key(&entry.case_id) {
        QueueStatus::Adjudicated
    } else {
        QueueStatus::Pending
    }
}

async fn queue(State(state): State<AppState>, Query(page): Query<Page>) -> Result<Json<Vec<QueueSummary>>, ApiError> {
    let entries = state.store.queue_entries()?;
    let verdicts = state.store.verdicts()?;
    let mut items: Vec<QueueSummary> = entries
        .iter()
        .map(|e| QueueSummary {
            case_id: e.case_id.clone(),
            status: status_of(e, &verdicts),
            enqueued_at: e.enqueued_at,
            opinion_count: e.opinions.len(),
        })
        .collect();
    // Stable: enqueue order is kept within each status.
    items.sort_by_key(|i| i.status);
    let size = page.page_size.unwrap_or(50).max(1);
    let index = page.page.unwrap_or(1).max(1) - 1;
    Ok(Json(items.into_iter().skip(index * size).take(size).collect()))
}

async fn case(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<QueueItem>, ApiError> {
    let entry = state
        .store
        .queue_entries()?
        .into_iter()
        .find(|e| e.case_id == id)
        .ok_or_else(|| ApiError::NotFound(format!("case {id} is not in the queue")))?;
    let verdicts = state.store.verdicts()?;
    Ok(Json(QueueItem {
        status: status_of(&entry, &verdicts),
        case_id: entry.case_id,
        case: entry.case,
        opinions: entry.opinions,
        enqueued_at: entry.enqueued_at,
    }))
}

async fn verdict(State(state): State<AppState>, Json(req): Json<VerdictRequest>) -> Result<Json<Verdict>, ApiError> {
    if req.diagnosis_text.trim().is_empty() {
        return Err(ApiError::Unprocessable("diagnosis_text is empty".into()));
    }
    if req.physician_id.trim().is_empty() {
        return Err(ApiError::Unprocessable("physician_id is empty".into()));
    }
    let verdict = Verdict {
        normalized: normalize(&req.diagnosis_text, &state.rules),
        case_id: req.case_id,
        physician_id: req.physician_id,
        diagnosis_text: req.diagnosis_text,
        submitted_at: Utc::now(),
    };
    state.store.submit_verdict(&verdict)?;
    Ok(Json(verdict))
}

async fn concept_score(
    State(state): State<AppState>,
    Json(req): Json<ConceptScoreRequest>,
) -> Result<Json<ConceptScore>, ApiError> {
    if !(1..=5).contains(&req.score) {
        return Err(ApiError::Unprocessable(format!("score {} not in 1..=5", req.score)));
    }
    let score = ConceptScore {
        concept_id: req.concept_id,
        physician_id: req.physician_id,
        score: req.score as u8,
        submitted_at: Utc::now(),
    };
    state.store.add_concept_score(&score)?;
    Ok(Json(score))
}

async fn concept_scores(State(state): State<AppState>) -> Result<Json<ScoreReport>, ApiError> {
    Ok(Json(summarize_scores(&state.store.concept_scores()?)))
}

/// Metrics for the requested run, else the latest consultation run.
pub fn current_metrics(store: &Store, rules: &MatchRuleSet, run_id: Option<String>) -> Result<WorkflowMetrics, StoreError> {
    let run_id = match run_id {
        Some(id) => Some(id),
        None => store.latest_consultation_run()?,
    };
    let Some(run_id) = run_id else {
        return Ok(WorkflowMetrics::default());
    };
    let records = store.load_consultations(&run_id)?;
    let truths = store
        .load_labeled()?
        .into_iter()
        .map(|(id, lc)| (id, lc.truth.disease))
        .collect();
    Ok(compute_workflow_metrics(&records, &store.verdicts()?, &truths, rules, Some(run_id)))
}

async fn metrics(State(state): State<AppState>, Query(q): Query<MetricsQuery>) -> Result<Json<WorkflowMetrics>, ApiError> {
    Ok(Json(current_metrics(&state.store, &state.rules, q.run_id)?))
}
