//! JSON-over-HTTP access to stored alert runs.
//!
//! | method | path                                   | body / query                      |
//! |--------|----------------------------------------|-----------------------------------|
//! | GET    | `/runs/{date}/alerts`                  | `?tier=red&department=Medicine`   |
//! | GET    | `/patients/{id}/risk-history`          |                                   |
//! | GET    | `/alerts/{patient_day}/explanation`    | `?k=10`                           |
//! | POST   | `/feedback`                            | `FeedbackEntry`                   |
//! | GET    | `/feedback`                            | `?from=&to=&verdict=`             |
//! | POST   | `/thresholds/whatif`                   | `TierThresholds`                  |
//! | GET    | `/model/status`                        |                                   |
//!
//! Errors come back as `{"error": "..."}` with 400 for malformed paths or
//! queries, 404 for missing runs or records, 422 for rejected submissions.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use ewi_core::alerting::{
    freshness, threshold_whatif, AlertError, AlertRecord, AlertStore, FeedbackAck, FeedbackEntry, FeedbackQuery,
    Freshness, Tier, TierThresholds, Verdict, WhatIfSummary,
};
use ewi_core::cohort::PatientDayKey;
use ewi_core::explain::{top_drivers, Driver};
use ewi_core::model::TreeEnsemble;

pub const DEFAULT_TOP_K: usize = 10;

/// Model facts reported by `/model/status`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub kind: String,
    pub n_estimators: usize,
    pub max_depth: usize,
    pub trained_on: Option<NaiveDate>,
    pub manifest_hash: String,
}

impl From<&TreeEnsemble> for ModelInfo {
    fn from(m: &TreeEnsemble) -> Self {
        ModelInfo {
            kind: m.kind.label().to_string(),
            n_estimators: m.trees.len(),
            max_depth: m.hyperparams.max_depth,
            trained_on: m.trained_on,
            manifest_hash: m.manifest_hash.clone(),
        }
    }
}

pub struct ServiceState {
    pub store: AlertStore,
    pub model: Option<ModelInfo>,
    /// Observed outcomes for stored patient-days, used by the what-if endpoint.
    pub labels: HashMap<PatientDayKey, u8>,
    /// Reference date for staleness; the local date when absent.
    pub as_of: Option<NaiveDate>,
}

impl ServiceState {
    fn today(&self) -> NaiveDate {
        self.as_of.unwrap_or_else(|| chrono::Local::now().date_naive())
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }
}

impl From<AlertError> for ApiError {
    fn from(e: AlertError) -> Self {
        let status = match e {
            AlertError::UnknownAlert(_)
            | AlertError::Feedback(_)
            | AlertError::Thresholds(_)
            | AlertError::EmptyHistory => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            log::error!("{e}");
        }
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;
type Shared = Arc<ServiceState>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/runs/{date}/alerts", get(run_alerts))
        .route("/patients/{id}/risk-history", get(risk_history))
        .route("/alerts/{patient_day}/explanation", get(explanation))
        .route("/feedback", post(submit_feedback).get(list_feedback))
        .route("/thresholds/whatif", post(whatif))
        .route("/model/status", get(model_status))
        .with_state(state)
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(addr: SocketAddr, state: Shared) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

fn parse_date(raw: &str) -> Result<NaiveDate, ApiError> {
    NaiveDate::parse_from_str(raw, "%Y-%m-%d").map_err(|_| ApiError::bad_request(format!("bad date {raw:?}")))
}

#[derive(Debug, Deserialize)]
pub struct AlertFilter {
    pub tier: Option<String>,
    pub department: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunAlerts {
    pub date: NaiveDate,
    pub alerts: Vec<AlertRecord>,
}

async fn run_alerts(
    State(state): State<Shared>,
    Path(date): Path<String>,
    Query(filter): Query<AlertFilter>,
) -> ApiResult<RunAlerts> {
    let date = parse_date(&date)?;
    let tier: Option<Tier> = filter
        .tier
        .as_deref()
        .map(str::parse)
        .transpose()
        .map_err(ApiError::bad_request)?;
    let alerts = state
        .store
        .load_run(date)?
        .ok_or_else(|| ApiError::not_found(format!("no run for {date}")))?
        .into_iter()
        .filter(|a| tier.map_or(true, |t| a.tier == t))
        .filter(|a| filter.department.as_deref().map_or(true, |d| a.location.department == d))
        .collect();
    Ok(Json(RunAlerts { date, alerts }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RiskPoint {
    pub date: NaiveDate,
    pub risk: f64,
    pub tier: Tier,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RiskHistory {
    pub patient_id: String,
    pub history: Vec<RiskPoint>,
}

async fn risk_history(State(state): State<Shared>, Path(id): Path<String>) -> ApiResult<RiskHistory> {
    let history: Vec<RiskPoint> = state
        .store
        .risk_history(&id)?
        .into_iter()
        .map(|a| RiskPoint {
            date: a.patient_day.date,
            risk: a.risk,
            tier: a.tier,
        })
        .collect();
    if history.is_empty() {
        return Err(ApiError::not_found(format!("no alerts for patient {id}")));
    }
    Ok(Json(RiskHistory { patient_id: id, history }))
}

#[derive(Debug, Deserialize)]
pub struct TopK {
    pub k: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExplanationResponse {
    pub patient_day: String,
    pub base: f64,
    pub margin: f64,
    pub drivers: Vec<Driver>,
}

async fn explanation(
    State(state): State<Shared>,
    Path(raw): Path<String>,
    Query(q): Query<TopK>,
) -> ApiResult<ExplanationResponse> {
    let key: PatientDayKey = raw.parse().map_err(|e| ApiError::bad_request(format!("{e}")))?;
    let k = q.k.unwrap_or(DEFAULT_TOP_K);
    if k == 0 {
        return Err(ApiError::bad_request("k must be at least 1"));
    }
    let record = state
        .store
        .load_explanation(&key)?
        .ok_or_else(|| ApiError::not_found(format!("no explanation for {key}")))?;
    let drivers = top_drivers(&record.to_explanation(), &record.names(), k)
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(Json(ExplanationResponse {
        patient_day: record.patient_day,
        base: record.base,
        margin: record.margin,
        drivers,
    }))
}

async fn submit_feedback(
    State(state): State<Shared>,
    Json(entry): Json<FeedbackEntry>,
) -> Result<(StatusCode, Json<FeedbackAck>), ApiError> {
    let ack = state.store.record_feedback(&entry)?;
    Ok((StatusCode::CREATED, Json(ack)))
}

#[derive(Debug, Deserialize)]
pub struct FeedbackFilter {
    pub from: Option<String>,
    pub to: Option<String>,
    pub verdict: Option<String>,
}

async fn list_feedback(
    State(state): State<Shared>,
    Query(f): Query<FeedbackFilter>,
) -> ApiResult<Vec<FeedbackEntry>> {
    let query = FeedbackQuery {
        from: f.from.as_deref().map(parse_date).transpose()?,
        to: f.to.as_deref().map(parse_date).transpose()?,
        verdict: f
            .verdict
            .as_deref()
            .map(str::parse::<Verdict>)
            .transpose()
            .map_err(ApiError::bad_request)?,
    };
    Ok(Json(state.store.feedback(&query)?))
}

async fn whatif(State(state): State<Shared>, Json(candidate): Json<TierThresholds>) -> ApiResult<WhatIfSummary> {
    let history: Vec<(AlertRecord, u8)> = state
        .store
        .all_alerts()?
        .into_iter()
        .filter_map(|a| state.labels.get(&a.patient_day).map(|&y| (a, y)))
        .collect();
    Ok(Json(threshold_whatif(&history, &candidate)?))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelStatus {
    pub model: ModelInfo,
    pub as_of: NaiveDate,
    /// Absent when the model carries no training date.
    pub freshness: Option<Freshness>,
    pub latest_run: Option<NaiveDate>,
}

async fn model_status(State(state): State<Shared>) -> ApiResult<ModelStatus> {
    let model = state
        .model
        .clone()
        .ok_or_else(|| ApiError::not_found("no model loaded"))?;
    let as_of = state.today();
    Ok(Json(ModelStatus {
        freshness: model.trained_on.map(|t| freshness(t, as_of)),
        model,
        as_of,
        latest_run: state.store.run_dates()?.last().copied(),
    }))
}
