//! JSON HTTP API over a [`CampaignStore`].

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use groupwise_core::simulator::SessionConfig;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::campaign::MarginalOrder;
use crate::error::{CampaignError, FieldError};
use crate::store::CampaignStore;

#[derive(Debug, Serialize)]
pub struct ErrorBody {
    pub error: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldError>,
}

impl IntoResponse for CampaignError {
    fn into_response(self) -> Response {
        let (status, error) = match &self {
            CampaignError::Invalid(_) => (StatusCode::BAD_REQUEST, "invalid_request"),
            CampaignError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            CampaignError::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            CampaignError::Degenerate(_) => (StatusCode::UNPROCESSABLE_ENTITY, "degenerate_evidence"),
            CampaignError::Corrupt(_) | CampaignError::Io(_) | CampaignError::Core(_) => {
                (StatusCode::INTERNAL_SERVER_ERROR, "internal")
            }
        };
        let fields = match &self {
            CampaignError::Invalid(f) => f.clone(),
            _ => Vec::new(),
        };
        let body = ErrorBody {
            error,
            message: self.to_string(),
            fields,
        };
        (status, Json(body)).into_response()
    }
}

/// Turns a body deserialization message (`path: problem`) into a field error.
fn body_error(text: &str) -> CampaignError {
    let detail = text.split_once("target type: ").map_or(text, |(_, d)| d);
    let (path, message) = match detail.split_once(": ") {
        Some((p, m)) if !p.is_empty() && p.chars().all(|c| c.is_ascii_alphanumeric() || "_.[]".contains(c)) => {
            (Some(p.to_string()), m)
        }
        _ => (None, detail),
    };
    let missing = message
        .strip_prefix("missing field `")
        .and_then(|r| r.split('`').next())
        .map(|name| match &path {
            Some(p) if p != "." => format!("{p}.{name}"),
            _ => name.to_string(),
        });
    let field = missing.or(path).filter(|p| p != ".");
    CampaignError::Invalid(vec![FieldError {
        field,
        message: message.to_string(),
    }])
}

fn json_body<T>(body: Result<Json<T>, JsonRejection>) -> Result<T, CampaignError> {
    body.map(|Json(v)| v).map_err(|e| body_error(&e.body_text()))
}

async fn blocking<T, F>(f: F) -> Result<T, CampaignError>
where
    F: FnOnce() -> Result<T, CampaignError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| CampaignError::Io(std::io::Error::other(e.to_string())))?
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    #[serde(default)]
    pub id: Option<String>,
    pub config: SessionConfig,
}

/// An outcome as `true`/`false` or `1`/`0`.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum OutcomeValue {
    Bool(bool),
    Int(u64),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultsRequest {
    pub outcomes: Vec<OutcomeValue>,
    /// Sequence number of the proposal these results answer.
    #[serde(default)]
    pub seq: Option<u64>,
}

fn outcome_bits(values: &[OutcomeValue]) -> Result<Vec<bool>, CampaignError> {
    let mut bad = Vec::new();
    let bits = values
        .iter()
        .enumerate()
        .map(|(i, v)| match v {
            OutcomeValue::Bool(b) => *b,
            OutcomeValue::Int(0) => false,
            OutcomeValue::Int(1) => true,
            OutcomeValue::Int(other) => {
                bad.push(FieldError::new(
                    Some(&format!("outcomes[{i}]")),
                    format!("must be 0, 1, true or false, got {other}"),
                ));
                false
            }
        })
        .collect();
    if bad.is_empty() {
        Ok(bits)
    } else {
        Err(CampaignError::Invalid(bad))
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginalQuery {
    #[serde(default)]
    pub order: MarginalOrder,
}

type AppState = Arc<CampaignStore>;

async fn create(State(store): State<AppState>, body: Result<Json<CreateRequest>, JsonRejection>) -> Response {
    let result = async {
        let req = json_body(body)?;
        blocking(move || store.create(req.id, req.config)).await
    }
    .await;
    match result {
        Ok(view) => (StatusCode::CREATED, Json(view)).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn show(State(store): State<AppState>, Path(id): Path<String>) -> Response {
    match store.view(&id) {
        Ok(view) => Json(view.as_ref()).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn propose(State(store): State<AppState>, Path(id): Path<String>) -> Response {
    match blocking(move || store.propose(&id)).await {
        Ok(p) => Json(p).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn results(
    State(store): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<ResultsRequest>, JsonRejection>,
) -> Response {
    let result = async {
        let req = json_body(body)?;
        let bits = outcome_bits(&req.outcomes)?;
        blocking(move || store.submit(&id, &bits, req.seq)).await
    }
    .await;
    match result {
        Ok((_, view)) => Json(view).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn marginal(
    State(store): State<AppState>,
    Path(id): Path<String>,
    query: Result<Query<MarginalQuery>, QueryRejection>,
) -> Response {
    let order = match query {
        Ok(Query(q)) => q.order,
        Err(e) => return CampaignError::invalid(Some("order"), e.body_text()).into_response(),
    };
    match store.marginal(&id, order) {
        Ok(m) => Json(m).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn events(State(store): State<AppState>, Path(id): Path<String>) -> Response {
    match store.events(&id) {
        Ok(ev) => Json(ev.as_ref()).into_response(),
        Err(e) => e.into_response(),
    }
}

/// The campaign API; static files from `ui`, when given, are served under
/// `/ui`.
pub fn router(store: Arc<CampaignStore>, ui: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/campaigns", post(create))
        .route("/campaigns/{id}", get(show))
        .route("/campaigns/{id}/proposal", post(propose))
        .route("/campaigns/{id}/results", post(results))
        .route("/campaigns/{id}/marginal", get(marginal))
        .route("/campaigns/{id}/events", get(events))
        .with_state(store);
    match ui {
        Some(dir) => api.nest_service("/ui", ServeDir::new(dir)),
        None => api,
    }
}
