//! HTTP routes. Each handler is a thin wrapper over an engine or manager call.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Request, State};
use axum::http::StatusCode;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use urgentflow::data::DataItem;
use urgentflow::engine::{EngineError, Incident, MessageRecord, ORIGIN_EXTERNAL};
use urgentflow::platform::Platform;
use urgentflow::simulation::{Simulation, SimulationError};
use urgentflow::{IncidentId, MessageId, SimId};

use crate::sources::{Clock, DataSource, SourceError, SourceRegistry, SourceStatus};

pub const API_KEY_HEADER: &str = "x-api-key";

#[derive(Clone)]
pub struct AppState {
    pub platform: Arc<Platform>,
    pub sources: Arc<SourceRegistry>,
    pub clock: Clock,
    pub api_key: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
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

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let status = match &e {
            EngineError::UnknownIncident(_) => StatusCode::NOT_FOUND,
            EngineError::InvalidStateTransition { .. } | EngineError::IncidentNotActive(_) => StatusCode::CONFLICT,
            EngineError::Store(_) => StatusCode::INTERNAL_SERVER_ERROR,
            EngineError::DuplicateKind(_) => StatusCode::CONFLICT,
            _ => StatusCode::BAD_REQUEST,
        };
        Self::new(status, e.to_string())
    }
}

impl From<SimulationError> for ApiError {
    fn from(e: SimulationError) -> Self {
        match e {
            SimulationError::Engine(e) => e.into(),
            SimulationError::UnknownSimulation(_) | SimulationError::UnknownIncident(_) => {
                Self::not_found(e.to_string())
            }
            SimulationError::InvalidStateTransition { .. } | SimulationError::IncidentNotActive(_) => {
                Self::new(StatusCode::CONFLICT, e.to_string())
            }
            _ => Self::bad_request(e.to_string()),
        }
    }
}

impl From<SourceError> for ApiError {
    fn from(e: SourceError) -> Self {
        match e {
            SourceError::Engine(e) => e.into(),
            SourceError::UnknownSource(_) => Self::not_found(e.to_string()),
            SourceError::Duplicate(_) | SourceError::NotPush(_) => Self::new(StatusCode::CONFLICT, e.to_string()),
            SourceError::Invalid(_) => Self::bad_request(e.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Parses a JSON body, mapping every failure to 400.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

/// Runs a blocking engine call off the async executor.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/openapi.json", get(openapi))
        .route("/kinds", get(list_kinds))
        .route("/incidents", post(create_incident).get(list_incidents))
        .route("/incidents/{id}", get(get_incident).delete(cancel_incident))
        .route("/incidents/{id}/activate", post(activate_incident))
        .route("/incidents/{id}/complete", post(complete_incident))
        .route("/incidents/{id}/messages", post(send_message).get(list_messages))
        .route("/simulations/{id}", get(get_simulation))
        .route("/sources", post(register_source).get(list_sources))
        .route("/sources/{id}", axum::routing::delete(remove_source))
        .route("/data/push/{source_id}", post(push_data))
        .layer(middleware::from_fn_with_state(state.clone(), require_key))
        .with_state(state)
}

async fn require_key(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(key) = &state.api_key {
        let given = req.headers().get(API_KEY_HEADER).and_then(|v| v.to_str().ok());
        if given != Some(key.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or wrong API key").into_response();
        }
    }
    next.run(req).await
}

async fn openapi() -> Json<Value> {
    Json(crate::openapi::document())
}

async fn list_kinds(State(s): State<AppState>) -> Json<Vec<String>> {
    Json(s.platform.engine.kinds())
}

#[derive(Debug, Deserialize)]
pub struct CreateIncident {
    pub name: String,
    pub kind: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub incident_id: IncidentId,
}

async fn create_incident(State(s): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<Created>)> {
    let req: CreateIncident = parse_body(&body)?;
    let id = blocking(move || Ok(s.platform.engine.create_incident(&req.name, &req.kind)?)).await?;
    Ok((StatusCode::CREATED, Json(Created { incident_id: id })))
}

async fn list_incidents(State(s): State<AppState>) -> Json<Vec<Incident>> {
    Json(s.platform.engine.incidents())
}

#[derive(Debug, Serialize)]
pub struct IncidentView {
    #[serde(flatten)]
    pub incident: Incident,
    pub simulations: Vec<Simulation>,
    pub data_items: Vec<DataItem>,
}

async fn get_incident(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<IncidentView>> {
    let id = IncidentId::from(id);
    let incident = s
        .platform
        .engine
        .incident(&id)
        .ok_or_else(|| ApiError::from(EngineError::UnknownIncident(id.clone())))?;
    Ok(Json(IncidentView {
        incident,
        simulations: s.platform.simulations.simulations_for(&id),
        data_items: s.platform.data.list_data(&id),
    }))
}

async fn activate_incident(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    blocking(move || Ok(s.platform.engine.activate_incident(&IncidentId::from(id))?)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn complete_incident(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    blocking(move || Ok(s.platform.engine.complete_incident(&IncidentId::from(id))?)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn cancel_incident(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    blocking(move || Ok(s.platform.engine.cancel_incident(&IncidentId::from(id))?)).await?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Debug, Deserialize)]
pub struct SendMessage {
    pub queue: String,
    /// A JSON string is sent as its raw UTF-8 bytes; any other JSON value
    /// is sent as its JSON text.
    #[serde(default)]
    pub payload: Value,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Accepted {
    pub message_id: Option<MessageId>,
}

async fn send_message(
    State(s): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<Accepted>)> {
    let req: SendMessage = parse_body(&body)?;
    let payload = match req.payload {
        Value::String(text) => text.into_bytes(),
        Value::Null => Vec::new(),
        other => other.to_string().into_bytes(),
    };
    let id = IncidentId::from(id);
    let msg = blocking(move || Ok(s.platform.engine.send_message(&req.queue, &id, payload, ORIGIN_EXTERNAL)?)).await?;
    Ok((StatusCode::ACCEPTED, Json(Accepted { message_id: Some(msg) })))
}

async fn list_messages(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Vec<MessageRecord>>> {
    let id = IncidentId::from(id);
    if s.platform.engine.incident(&id).is_none() {
        return Err(EngineError::UnknownIncident(id).into());
    }
    Ok(Json(s.platform.engine.messages_for(&id)))
}

async fn get_simulation(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Simulation>> {
    let id = SimId::from(id);
    s.platform
        .simulations
        .get_simulation(&id)
        .map(Json)
        .ok_or_else(|| SimulationError::UnknownSimulation(id).into())
}

async fn register_source(State(s): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<DataSource>)> {
    let source: DataSource = parse_body(&body)?;
    let now = (s.clock)();
    let echo = source.clone();
    blocking(move || Ok(s.sources.register(source, now)?)).await?;
    Ok((StatusCode::CREATED, Json(echo)))
}

async fn list_sources(State(s): State<AppState>) -> Json<Vec<SourceStatus>> {
    Json(s.sources.list())
}

async fn remove_source(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    s.sources.remove(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn push_data(
    State(s): State<AppState>,
    Path(source_id): Path<String>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<Accepted>)> {
    let payload = body.to_vec();
    let message_id = blocking(move || Ok(s.sources.push(&source_id, payload)?)).await?;
    Ok((StatusCode::ACCEPTED, Json(Accepted { message_id })))
}
