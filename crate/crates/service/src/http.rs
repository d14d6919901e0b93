//! HTTP routes and the per-document sync WebSocket.
//!
//! Every route except `/health` needs `Authorization: Bearer <token>`. The
//! sync socket also accepts `?token=` since browsers cannot set headers on
//! WebSocket upgrades. Errors are JSON: `{"error": code, "message": text}`.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use promptloop_core::analytics::Metric;
use promptloop_core::batch::ExportFormat;
use promptloop_core::dataset::TableFormat;
use promptloop_core::evaluation::{Coverage, EvaluationType, Evaluator, NewEvalItem, Payload};
use promptloop_core::provider::{GenerationParams, ProviderError};
use promptloop_core::sync::EditOp;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::broadcast::error::RecvError;

use crate::auth::{Action, Auth, Principal};
use crate::error::{ErrorClass, ServiceError};
use crate::service::{NewPrompt, PlanRequest, PromptUpdate, Service, SyncMessage};

#[derive(Clone)]
pub struct AppState {
    pub svc: Service,
    pub auth: Arc<Auth>,
}

#[derive(Debug)]
pub struct ApiError(pub ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

pub fn status_for(e: &ServiceError) -> StatusCode {
    match e.class() {
        ErrorClass::Validation => StatusCode::UNPROCESSABLE_ENTITY,
        ErrorClass::NotFound => StatusCode::NOT_FOUND,
        ErrorClass::Conflict => StatusCode::CONFLICT,
        ErrorClass::Auth => StatusCode::UNAUTHORIZED,
        ErrorClass::Forbidden => StatusCode::FORBIDDEN,
        ErrorClass::Provider => match e {
            ServiceError::Provider(ProviderError::Unavailable(_)) => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::BAD_GATEWAY,
        },
        ErrorClass::Storage => StatusCode::SERVICE_UNAVAILABLE,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": self.0.code(), "message": self.0.to_string()});
        (status_for(&self.0), Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let raw: &[u8] = if body.is_empty() { b"{}" } else { body };
    serde_json::from_slice(raw).map_err(|e| ApiError(ServiceError::Validation(format!("request body: {e}"))))
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
}

fn token(headers: &HeaderMap) -> Result<&str, ApiError> {
    bearer(headers).ok_or(ApiError(ServiceError::UnknownToken))
}

impl AppState {
    fn allow(&self, headers: &HeaderMap, action: Action) -> ApiResult<Principal> {
        Ok(self.auth.authorize(token(headers)?, &action)?)
    }

    /// Resolves an evaluator-scoped action, defaulting the evaluator to the
    /// caller.
    fn allow_evaluator(
        &self,
        headers: &HeaderMap,
        requested: Option<&str>,
        make: impl Fn(&str) -> Action<'_>,
    ) -> ApiResult<(Principal, String)> {
        let tok = token(headers)?;
        let principal = self.auth.principal(tok)?.clone();
        let evaluator_id = requested.unwrap_or(&principal.user_id).to_string();
        self.auth.authorize(tok, &make(&evaluator_id))?;
        Ok((principal, evaluator_id))
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static) -> ApiResult<T> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError),
        Err(e) => Err(ApiError(ServiceError::Validation(format!("worker failed: {e}")))),
    }
}

fn ndjson_line(v: &impl Serialize) -> Bytes {
    let mut line = serde_json::to_vec(v).expect("serializable");
    line.push(b'\n');
    Bytes::from(line)
}

fn ndjson_response(body: Body) -> Response {
    let mut r = Response::new(body);
    r.headers_mut()
        .insert(header::CONTENT_TYPE, HeaderValue::from_static("application/x-ndjson"));
    r
}

fn bytes_response(content_type: &'static str, bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, content_type)], bytes).into_response()
}

fn export_format(raw: Option<&str>) -> ApiResult<ExportFormat> {
    Ok(raw.unwrap_or("csv").parse().map_err(ServiceError::from)?)
}

fn content_type_for(format: ExportFormat) -> &'static str {
    match format {
        ExportFormat::Csv => "text/csv; charset=utf-8",
        ExportFormat::Structured => "application/json",
    }
}

pub fn router(svc: Service, auth: Auth) -> Router {
    let app = AppState {
        svc,
        auth: Arc::new(auth),
    };
    Router::new()
        .route("/health", get(health))
        .route("/models", get(list_models))
        .route("/admin/state", get(admin_state))
        .route("/prompts", post(create_prompt).get(list_prompts))
        .route("/prompts/import", post(import_prompt))
        .route("/prompts/{id}", get(get_prompt).patch(update_prompt))
        .route("/prompts/{id}/export", get(export_prompt))
        .route("/prompts/{id}/edits", post(edit_prompt))
        .route("/prompts/{id}/blocks/{block_id}/rollback", post(rollback_block))
        .route("/prompts/{id}/blocks/{block_id}/diff", get(diff_block))
        .route("/prompts/{id}/test", post(test_prompt))
        .route("/prompts/{id}/sync", get(sync_socket))
        .route("/datasets", post(import_dataset))
        .route("/datasets/{id}", get(get_dataset))
        .route("/batches", get(list_batches))
        .route("/batches/plan", post(plan_batch))
        .route("/batches/{id}", get(get_batch))
        .route("/batches/{id}/start", post(start_batch))
        .route("/batches/{id}/pause", post(pause_batch))
        .route("/batches/{id}/resume", post(resume_batch))
        .route("/batches/{id}/outputs", get(batch_outputs))
        .route("/batches/{id}/export", get(export_batch))
        .route("/batches/{id}/to-scenario", post(batch_to_scenario))
        .route("/scenarios", post(create_scenario).get(list_scenarios))
        .route("/scenarios/{id}", get(get_scenario))
        .route("/scenarios/{id}/assign", post(assign_scenario))
        .route("/scenarios/{id}/close", post(close_scenario))
        .route("/scenarios/{id}/queue", get(scenario_queue))
        .route("/scenarios/{id}/assessments", post(submit_assessment))
        .route("/scenarios/{id}/llm-evaluators/{evaluator_id}/run", post(run_llm_evaluator))
        .route("/scenarios/{id}/agreement", get(scenario_agreement))
        .route("/scenarios/{id}/provenance", get(scenario_provenance))
        .route("/scenarios/{id}/summary", get(scenario_summary))
        .route("/scenarios/{id}/export", get(export_scenario))
        .with_state(app)
}

async fn health() -> impl IntoResponse {
    Json(json!({"status": "ok"}))
}

async fn list_models(State(app): State<AppState>, headers: HeaderMap) -> ApiResult<impl IntoResponse> {
    app.allow(&headers, Action::ListModels)?;
    Ok(Json(app.svc.models()))
}

async fn admin_state(State(app): State<AppState>, headers: HeaderMap) -> ApiResult<impl IntoResponse> {
    app.allow(&headers, Action::Admin)?;
    let svc = app.svc.clone();
    let (offset, digest) = blocking(move || Ok(svc.with_state(|s| (s.offset, s.digest())))).await?;
    Ok(Json(json!({"offset": offset, "digest": digest})))
}

// ---------------------------------------------------------------------------
// Prompts

async fn create_prompt(State(app): State<AppState>, headers: HeaderMap, body: Bytes) -> ApiResult<impl IntoResponse> {
    let who = app.allow(&headers, Action::EditPrompt)?;
    let req: NewPrompt = parse(&body)?;
    let svc = app.svc.clone();
    let view = blocking(move || svc.create_prompt(&who.user_id, req)).await?;
    Ok((StatusCode::CREATED, Json(view)))
}

async fn list_prompts(State(app): State<AppState>, headers: HeaderMap) -> ApiResult<impl IntoResponse> {
    app.allow(&headers, Action::ReadPrompt)?;
    Ok(Json(app.svc.prompts()))
}

async fn import_prompt(State(app): State<AppState>, headers: HeaderMap, body: Bytes) -> ApiResult<impl IntoResponse> {
    let who = app.allow(&headers, Action::EditPrompt)?;
    let raw = String::from_utf8(body.to_vec()).map_err(|_| ServiceError::Validation("body is not UTF-8".into()))?;
    let svc = app.svc.clone();
    let view = blocking(move || svc.import_prompt(&who.user_id, &raw)).await?;
    Ok((StatusCode::CREATED, Json(view)))
}

async fn get_prompt(State(app): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    app.allow(&headers, Action::ReadPrompt)?;
    Ok(Json(app.svc.prompt(&id)?))
}

#[derive(Deserialize)]
struct UpdateBody {
    updates: Vec<PromptUpdate>,
}

async fn update_prompt(
    State(app): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let who = app.allow(&headers, Action::EditPrompt)?;
    let req: UpdateBody = parse(&body)?;
    let svc = app.svc.clone();
    Ok(Json(blocking(move || svc.update_prompt(&who.user_id, &id, req.updates)).await?))
}

async fn export_prompt(State(app): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<Response> {
    app.allow(&headers, Action::ReadPrompt)?;
    Ok(bytes_response("application/json", app.svc.export_prompt(&id)?.into_bytes()))
}

#[derive(Deserialize)]
struct EditBody {
    block_id: String,
    op: EditOp,
}

async fn edit_prompt(
    State(app): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let who = app.allow(&headers, Action::EditPrompt)?;
    let req: EditBody = parse(&body)?;
    let svc = app.svc.clone();
    let committed = blocking(move || svc.edit(&who.user_id, &id, &req.block_id, req.op)).await?;
    Ok(Json(json!({"committed": committed})))
}

#[derive(Deserialize)]
struct RollbackBody {
    target_rev: u64,
}

async fn rollback_block(
    State(app): State<AppState>,
    headers: HeaderMap,
    Path((id, block_id)): Path<(String, String)>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let who = app.allow(&headers, Action::EditPrompt)?;
    let req: RollbackBody = parse(&body)?;
    let svc = app.svc.clone();
    let head = blocking(move || svc.rollback(&who.user_id, &id, &block_id, req.target_rev)).await?;
    Ok(Json(json!({"rev": head})))
}

#[derive(Deserialize)]
struct DiffQuery {
    from: u64,
    to: Option<u64>,
}

async fn diff_block(
    State(app): State<AppState>,
    headers: HeaderMap,
    Path((id, block_id)): Path<(String, String)>,
    Query(q): Query<DiffQuery>,
) -> ApiResult<impl IntoResponse> {
    app.allow(&headers, Action::ReadPrompt)?;
    let to = match q.to {
        Some(t) => t,
        None => app.svc.block_state(&id, &block_id)?.rev,
    };
    Ok(Json(app.svc.revision_diff(&id, &block_id, q.from, to)?))
}

#[derive(Deserialize)]
struct TestBody {
    model_id: String,
    #[serde(default)]
    params: GenerationParams,
    #[serde(default)]
    bindings: BTreeMap<String, String>,
}

/// Streams `{"type":"chunk","text":..}` lines, then one `done` line with
/// usage or an `error` line.
async fn test_prompt(
    State(app): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    app.allow(&headers, Action::TestPrompt)?;
    let req: TestBody = parse(&body)?;
    let svc = app.svc.clone();
    // Render errors surface as a status code before streaming starts.
    let request = {
        let svc = svc.clone();
        let (id, model) = (id.clone(), req.model_id.clone());
        blocking(move || svc.test_request(&id, &model, req.params, req.bindings)).await?
    };
    let (tx, rx) = futures::channel::mpsc::unbounded::<Result<Bytes, Infallible>>();
    tokio::task::spawn_blocking(move || {
        let chunk_tx = tx.clone();
        let result = svc.gateway().complete_streaming(&request, &mut |text| {
            let _ = chunk_tx.unbounded_send(Ok(ndjson_line(&json!({"type": "chunk", "text": text}))));
        });
        let last = match result {
            Ok(usage) => json!({"type": "done", "usage": usage}),
            Err(e) => {
                let e = ServiceError::from(e);
                json!({"type": "error", "error": e.code(), "message": e.to_string()})
            }
        };
        let _ = tx.unbounded_send(Ok(ndjson_line(&last)));
    });
    Ok(ndjson_response(Body::from_stream(rx)))
}

// ---------------------------------------------------------------------------
// Sync socket

#[derive(Deserialize)]
struct TokenQuery {
    token: Option<String>,
}

async fn sync_socket(
    State(app): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Query(q): Query<TokenQuery>,
    ws: WebSocketUpgrade,
) -> ApiResult<Response> {
    let tok = bearer(&headers)
        .map(str::to_string)
        .or(q.token)
        .ok_or(ApiError(ServiceError::UnknownToken))?;
    let who = app.auth.authorize(&tok, &Action::EditPrompt)?;
    let (snapshot, rx) = app.svc.subscribe(&id)?;
    Ok(ws.on_upgrade(move |socket| sync_session(app.svc, who, id, snapshot, rx, socket)))
}

fn ws_text(msg: &SyncMessage) -> Message {
    Message::Text(serde_json::to_string(msg).expect("serializable").into())
}

async fn sync_session(
    svc: Service,
    who: Principal,
    doc_id: String,
    snapshot: SyncMessage,
    mut rx: tokio::sync::broadcast::Receiver<SyncMessage>,
    socket: WebSocket,
) {
    let session_id = match &snapshot {
        SyncMessage::Snapshot { session_id, .. } => session_id.clone(),
        _ => unreachable!("subscribe returns a snapshot"),
    };
    let (mut sink, mut stream) = socket.split();
    if sink.send(ws_text(&snapshot)).await.is_err() {
        return;
    }
    loop {
        tokio::select! {
            incoming = stream.next() => {
                let text = match incoming {
                    Some(Ok(Message::Text(t))) => t,
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => continue,
                };
                let (block_id, mut op) = match serde_json::from_str::<SyncMessage>(text.as_str()) {
                    Ok(SyncMessage::Edit { block_id, op }) => (block_id, op),
                    Ok(_) | Err(_) => {
                        let err = SyncMessage::Error {
                            code: "bad_message".into(),
                            message: "expected {\"type\":\"edit\",\"block_id\":..,\"op\":..}".into(),
                            block_id: None,
                        };
                        if sink.send(ws_text(&err)).await.is_err() { break; }
                        continue;
                    }
                };
                op.session_id = session_id.clone();
                let (svc2, doc, user, block) = (svc.clone(), doc_id.clone(), who.user_id.clone(), block_id.clone());
                let result = blocking(move || svc2.edit(&user, &doc, &block, op)).await;
                if let Err(ApiError(e)) = result {
                    // The client must resync from the snapshot that follows.
                    let err = SyncMessage::Error { code: e.code().into(), message: e.to_string(), block_id: Some(block_id) };
                    if sink.send(ws_text(&err)).await.is_err() { break; }
                    match svc.sync_snapshot(&doc_id, &session_id) {
                        Ok(snap) => if sink.send(ws_text(&snap)).await.is_err() { break; },
                        Err(_) => break,
                    }
                }
            }
            msg = rx.recv() => {
                let msg = match msg {
                    Ok(SyncMessage::Snapshot { doc_id, blocks, .. }) => SyncMessage::Snapshot { session_id: session_id.clone(), doc_id, blocks },
                    Ok(m) => m,
                    Err(RecvError::Lagged(_)) => {
                        let err = SyncMessage::Error { code: "lagged".into(), message: "subscriber fell behind; reconnect".into(), block_id: None };
                        let _ = sink.send(ws_text(&err)).await;
                        break;
                    }
                    Err(RecvError::Closed) => break,
                };
                if sink.send(ws_text(&msg)).await.is_err() { break; }
            }
        }
    }
    let _ = sink.close().await;
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Deserialize)]
struct DatasetBody {
    name: String,
    #[serde(default = "default_table_format")]
    format: TableFormat,
    content: String,
}

fn default_table_format() -> TableFormat {
    TableFormat::Csv
}

#[derive(Serialize)]
struct DatasetSummary {
    dataset_id: String,
    name: String,
    columns: Vec<String>,
    item_count: usize,
}

async fn import_dataset(State(app): State<AppState>, headers: HeaderMap, body: Bytes) -> ApiResult<impl IntoResponse> {
    let who = app.allow(&headers, Action::ImportDataset)?;
    let req: DatasetBody = parse(&body)?;
    let svc = app.svc.clone();
    let ds = blocking(move || svc.import_dataset(&who.user_id, &req.content, &req.name, req.format)).await?;
    Ok((
        StatusCode::CREATED,
        Json(DatasetSummary {
            item_count: ds.items.len(),
            dataset_id: ds.dataset_id,
            name: ds.name,
            columns: ds.columns,
        }),
    ))
}

async fn get_dataset(State(app): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    app.allow(&headers, Action::ImportDataset)?;
    Ok(Json(app.svc.dataset(&id)?))
}

// ---------------------------------------------------------------------------
// Batches

async fn list_batches(State(app): State<AppState>, headers: HeaderMap) -> ApiResult<impl IntoResponse> {
    app.allow(&headers, Action::ViewBatch)?;
    Ok(Json(app.svc.jobs()))
}

async fn plan_batch(State(app): State<AppState>, headers: HeaderMap, body: Bytes) -> ApiResult<impl IntoResponse> {
    let who = app.allow(&headers, Action::PlanBatch)?;
    let req: PlanRequest = parse(&body)?;
    let svc = app.svc.clone();
    let plan = blocking(move || svc.plan_batch(&who.user_id, req)).await?;
    Ok((
        StatusCode::CREATED,
        Json(json!({
            "job_id": plan.plan_id,
            "task_count": plan.task_count,
            "estimated_cost": plan.estimated_cost,
            "budget_cap": plan.budget_cap,
            "plan": plan,
        })),
    ))
}

async fn get_batch(State(app): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    app.allow(&headers, Action::ViewBatch)?;
    Ok(Json(app.svc.job(&id)?))
}

async fn start_batch(State(app): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let who = app.allow(&headers, Action::ControlBatch)?;
    let svc = app.svc.clone();
    Ok(Json(blocking(move || svc.start_batch(&who.user_id, &id)).await?))
}

async fn pause_batch(State(app): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let who = app.allow(&headers, Action::ControlBatch)?;
    let svc = app.svc.clone();
    Ok(Json(blocking(move || svc.pause_batch(&who.user_id, &id)).await?))
}

/// Body `{"budget_cap": n}` replaces the cap, `{"budget_cap": null}`
/// removes it, and an empty body keeps it.
async fn resume_batch(
    State(app): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let who = app.allow(&headers, Action::ControlBatch)?;
    let v: serde_json::Value = parse(&body)?;
    let cap = match v.get("budget_cap") {
        None => None,
        Some(serde_json::Value::Null) => Some(None),
        Some(n) => Some(Some(n.as_u64().ok_or_else(|| {
            ServiceError::Validation("budget_cap must be a non-negative integer".into())
        })?)),
    };
    let svc = app.svc.clone();
    Ok(Json(blocking(move || svc.resume_batch(&who.user_id, &id, cap)).await?))
}

#[derive(Deserialize)]
struct OutputsQuery {
    #[serde(default)]
    from: usize,
    #[serde(default)]
    follow: bool,
}

/// NDJSON of outputs in arrival order. With `follow=true` the stream stays
/// open until the job stops producing.
async fn batch_outputs(
    State(app): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Query(q): Query<OutputsQuery>,
) -> ApiResult<Response> {
    app.allow(&headers, Action::ViewBatch)?;
    app.svc.job(&id)?;
    let watch = app.svc.watch_offset();
    let init = (app.svc.clone(), id, q.from, watch, false);
    let stream = futures::stream::unfold(init, move |(svc, id, pos, mut watch, done)| async move {
        if done {
            return None;
        }
        loop {
            let Ok((batch, live)) = svc.outputs_since(&id, pos) else {
                return None;
            };
            if !batch.is_empty() {
                let mut buf = Vec::new();
                for o in &batch {
                    buf.extend_from_slice(&ndjson_line(o));
                }
                let next = pos + batch.len();
                return Some((Ok::<_, Infallible>(Bytes::from(buf)), (svc, id, next, watch, !q.follow)));
            }
            if !q.follow || !live {
                return None;
            }
            let _ = tokio::time::timeout(Duration::from_millis(250), watch.changed()).await;
        }
    });
    Ok(ndjson_response(Body::from_stream(stream)))
}

#[derive(Deserialize)]
struct FormatQuery {
    format: Option<String>,
}

async fn export_batch(
    State(app): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Query(q): Query<FormatQuery>,
) -> ApiResult<Response> {
    app.allow(&headers, Action::ExportBatch)?;
    let format = export_format(q.format.as_deref())?;
    Ok(bytes_response(content_type_for(format), app.svc.export_batch(&id, format)?))
}

#[derive(Deserialize)]
struct ToScenarioBody {
    eval_type: EvaluationType,
}

async fn batch_to_scenario(
    State(app): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let who = app.allow(&headers, Action::ManageScenario)?;
    let req: ToScenarioBody = parse(&body)?;
    let svc = app.svc.clone();
    let s = blocking(move || svc.scenario_from_batch(&who.user_id, &id, req.eval_type)).await?;
    Ok((StatusCode::CREATED, Json(s)))
}

// ---------------------------------------------------------------------------
// Scenarios

#[derive(Deserialize)]
struct ScenarioBody {
    eval_type: EvaluationType,
    items: Vec<NewEvalItem>,
}

async fn create_scenario(State(app): State<AppState>, headers: HeaderMap, body: Bytes) -> ApiResult<impl IntoResponse> {
    let who = app.allow(&headers, Action::ManageScenario)?;
    let req: ScenarioBody = parse(&body)?;
    let svc = app.svc.clone();
    let s = blocking(move || svc.create_scenario(&who.user_id, req.eval_type, req.items)).await?;
    Ok((StatusCode::CREATED, Json(s)))
}

async fn list_scenarios(State(app): State<AppState>, headers: HeaderMap) -> ApiResult<impl IntoResponse> {
    app.allow(&headers, Action::ManageScenario)?;
    Ok(Json(app.svc.scenarios()))
}

async fn get_scenario(State(app): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    app.allow(&headers, Action::ManageScenario)?;
    Ok(Json(app.svc.scenario(&id)?))
}

#[derive(Deserialize)]
struct AssignBody {
    evaluators: Vec<Evaluator>,
    coverage: Coverage,
}

async fn assign_scenario(
    State(app): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let who = app.allow(&headers, Action::ManageScenario)?;
    let req: AssignBody = parse(&body)?;
    let svc = app.svc.clone();
    Ok(Json(blocking(move || svc.assign(&who.user_id, &id, req.evaluators, req.coverage)).await?))
}

async fn close_scenario(State(app): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let who = app.allow(&headers, Action::ManageScenario)?;
    let svc = app.svc.clone();
    Ok(Json(blocking(move || svc.close_scenario(&who.user_id, &id)).await?))
}

#[derive(Deserialize)]
struct QueueQuery {
    evaluator_id: Option<String>,
}

async fn scenario_queue(
    State(app): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Query(q): Query<QueueQuery>,
) -> ApiResult<impl IntoResponse> {
    let (_, evaluator_id) =
        app.allow_evaluator(&headers, q.evaluator_id.as_deref(), |e| Action::ViewQueue { evaluator_id: e })?;
    Ok(Json(app.svc.queue(&id, &evaluator_id)?))
}

#[derive(Deserialize)]
struct SubmitBody {
    evaluator_id: Option<String>,
    target_id: String,
    payload: Payload,
}

async fn submit_assessment(
    State(app): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let req: SubmitBody = parse(&body)?;
    let (who, evaluator_id) = app.allow_evaluator(&headers, req.evaluator_id.as_deref(), |e| {
        Action::SubmitAssessment { evaluator_id: e }
    })?;
    let svc = app.svc.clone();
    let a = blocking(move || svc.submit_assessment(&who.user_id, &id, &evaluator_id, &req.target_id, req.payload)).await?;
    // Echo only blinded fields back to the submitter.
    Ok((
        StatusCode::CREATED,
        Json(json!({
            "assessment_id": a.assessment_id,
            "target_id": a.target_id,
            "submitted_at": a.submitted_at,
        })),
    ))
}

#[derive(Deserialize)]
struct LlmRunBody {
    rubric: Option<String>,
    #[serde(default)]
    params: GenerationParams,
}

async fn run_llm_evaluator(
    State(app): State<AppState>,
    headers: HeaderMap,
    Path((id, evaluator_id)): Path<(String, String)>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let who = app.allow(&headers, Action::ManageScenario)?;
    let req: LlmRunBody = parse(&body)?;
    let svc = app.svc.clone();
    let report = blocking(move || {
        svc.run_llm_evaluator(&who.user_id, &id, &evaluator_id, req.rubric.as_deref(), req.params)
    })
    .await?;
    Ok(Json(json!({
        "submitted": report.submitted.len(),
        "skipped": report.skipped,
    })))
}

#[derive(Deserialize)]
struct AgreementQuery {
    facet: Option<String>,
    metric: Option<Metric>,
}

async fn scenario_agreement(
    State(app): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Query(q): Query<AgreementQuery>,
) -> ApiResult<impl IntoResponse> {
    app.allow(&headers, Action::ViewAnalytics)?;
    let svc = app.svc.clone();
    Ok(Json(blocking(move || svc.agreement(&id, q.facet.as_deref(), q.metric)).await?))
}

async fn scenario_provenance(
    State(app): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Query(q): Query<FormatQuery>,
) -> ApiResult<Response> {
    app.allow(&headers, Action::ViewAnalytics)?;
    let svc = app.svc.clone();
    let report = blocking(move || svc.provenance(&id)).await?;
    Ok(match q.format.as_deref().unwrap_or("json") {
        "csv" => bytes_response("text/csv; charset=utf-8", report.to_csv()),
        "json" => Json(report).into_response(),
        other => return Err(ServiceError::Validation(format!("unknown format {other}")).into()),
    })
}

async fn scenario_summary(State(app): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    app.allow(&headers, Action::ViewAnalytics)?;
    let svc = app.svc.clone();
    Ok(Json(blocking(move || svc.comparison(&id)).await?))
}

async fn export_scenario(
    State(app): State<AppState>,
    headers: HeaderMap,
    Path(id): Path<String>,
    Query(q): Query<FormatQuery>,
) -> ApiResult<Response> {
    app.allow(&headers, Action::ExportAssessments)?;
    let format = export_format(q.format.as_deref())?;
    let svc = app.svc.clone();
    let bytes = blocking(move || svc.export_assessments(&id, format)).await?;
    Ok(bytes_response(content_type_for(format), bytes))
}

/// Binds `listen` and serves until ctrl-c. Prints the bound address on
/// stdout so callers can pass port 0.
pub async fn serve(listen: &str, svc: Service, auth: Auth) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(listen).await?;
    let addr = listener.local_addr()?;
    println!("listening on {addr}");
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(svc, auth))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
