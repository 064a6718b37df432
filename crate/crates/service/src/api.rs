//! HTTP routes. Every body is JSON; job events stream as NDJSON.

use std::convert::Infallible;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post, put};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use convbench::activations::{self, extract, matrix_view, ActivationError, Phase};
use convbench::config::Mode;
use convbench::engine::LayerKind;
use convbench::modelspec::{
    layer_kind_name, LayerSpec, ShapeTrace, SpecError, UserLayerKind, Violation, WorkspaceSequence, WORKSPACE_CAPACITY,
};
use convbench::rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::state::{AppState, Session};

pub const NDJSON: &str = "application/x-ndjson";

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/layers", post(add_layer))
        .route("/sessions/{id}/layers/{layer}", delete(remove_layer))
        .route("/sessions/{id}/class", put(select_class))
        .route("/sessions/{id}/train", post(train))
        .route("/sessions/{id}/activations", get(activations))
        .route("/sessions/{id}/history", get(history))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/events", get(job_events))
        .with_state(state)
}

/// An error response: `{"error": message, ...extra}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({ "error": message.into() }),
        }
    }

    fn with(mut self, key: &str, value: impl Serialize) -> Self {
        self.body[key] = serde_json::to_value(value).unwrap_or(Value::Null);
        self
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown {what} {id}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_body<T: DeserializeOwned + Default>(bytes: &Bytes) -> ApiResult<T> {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(bytes).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("bad request body: {e}")))
}

fn session(state: &AppState, id: &str) -> ApiResult<Arc<Session>> {
    state.session(id).ok_or_else(|| ApiError::not_found("session", id))
}

#[derive(Serialize)]
struct SequenceView {
    id: String,
    sequence: WorkspaceSequence,
    trace: ShapeTrace,
    capacity: usize,
    selected_class: usize,
    active_job: Option<String>,
}

fn sequence_view(state: &AppState, session: &Session) -> SequenceView {
    let data = session.data.lock().unwrap();
    SequenceView {
        id: session.id.clone(),
        trace: state.trace(&data.sequence),
        sequence: data.sequence.clone(),
        capacity: WORKSPACE_CAPACITY,
        selected_class: data.selected_class,
        active_job: data.active_job.clone(),
    }
}

async fn health(State(state): State<AppState>) -> Json<Value> {
    let (h, w, c) = state.input_shape();
    Json(json!({
        "status": "ok",
        "classes": state.data().class_names(),
        "input_shape": [h, w, c],
        "capacity": WORKSPACE_CAPACITY,
    }))
}

async fn create_session(State(state): State<AppState>) -> (StatusCode, Json<SequenceView>) {
    let s = state.create_session();
    (StatusCode::CREATED, Json(sequence_view(&state, &s)))
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SequenceView>> {
    let s = session(&state, &id)?;
    Ok(Json(sequence_view(&state, &s)))
}

#[derive(Deserialize)]
struct AddLayer {
    kind: String,
    /// Drop position; omitted means the end.
    index: Option<usize>,
}

fn spec_error(e: SpecError, attempted: usize) -> ApiError {
    match e {
        SpecError::WorkspaceFull => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "workspace full").with(
            "violations",
            [Violation::Capacity {
                count: attempted,
                limit: WORKSPACE_CAPACITY,
            }],
        ),
        SpecError::Invalid(v) => {
            ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, SpecError::Invalid(v.clone()).to_string()).with("violations", v)
        }
        SpecError::NotFound(id) => ApiError::not_found("layer", &id),
        other => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, other.to_string()),
    }
}

async fn add_layer(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<SequenceView>> {
    let s = session(&state, &id)?;
    let req: AddLayer = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("bad request body: {e}")))?;
    let kind: UserLayerKind = req
        .kind
        .parse()
        .map_err(|e: SpecError| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    {
        let mut data = s.data.lock().unwrap();
        let attempted = data.sequence.len() + 1;
        let index = req.index.unwrap_or(data.sequence.len());
        let layer_id = data.fresh_layer_id();
        data.sequence = data
            .sequence
            .place_layer(LayerSpec::new(layer_id, kind), index)
            .map_err(|e| spec_error(e, attempted))?;
    }
    Ok(Json(sequence_view(&state, &s)))
}

async fn remove_layer(
    State(state): State<AppState>,
    Path((id, layer)): Path<(String, String)>,
) -> ApiResult<Json<SequenceView>> {
    let s = session(&state, &id)?;
    {
        let mut data = s.data.lock().unwrap();
        data.sequence = data.sequence.remove_layer(&layer).map_err(|e| spec_error(e, 0))?;
    }
    Ok(Json(sequence_view(&state, &s)))
}

#[derive(Deserialize)]
struct SelectClass {
    class: usize,
}

fn check_class(state: &AppState, class: usize) -> ApiResult<()> {
    if class >= state.num_classes() {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("class {class} out of range (0..{})", state.num_classes()),
        ));
    }
    Ok(())
}

async fn select_class(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<SequenceView>> {
    let s = session(&state, &id)?;
    let req: SelectClass = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("bad request body: {e}")))?;
    check_class(&state, req.class)?;
    s.data.lock().unwrap().selected_class = req.class;
    Ok(Json(sequence_view(&state, &s)))
}

#[derive(Deserialize, Default)]
struct TrainRequest {
    #[serde(default)]
    mode: Mode,
    seed: Option<u64>,
}

async fn train(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let s = session(&state, &id)?;
    let req: TrainRequest = parse_body(&body)?;
    let seed = req
        .seed
        .or(state.config().training.seed)
        .unwrap_or_else(rng::fresh_seed);
    match state.submit(&s, req.mode, seed) {
        Ok(job) => {
            let view = job.view();
            Ok((
                StatusCode::ACCEPTED,
                Json(json!({ "job_id": view.id, "state": view.state, "mode": view.mode, "seed": view.seed })),
            )
                .into_response())
        }
        Err(active) => Err(ApiError::new(StatusCode::CONFLICT, "job in progress").with("job_id", active)),
    }
}

async fn get_job(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let job = state.job(&id).ok_or_else(|| ApiError::not_found("job", &id))?;
    Ok(Json(job.view()).into_response())
}

/// Replays the job's event log from the start, then follows it until the
/// terminal event.
async fn job_events(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let job = state.job(&id).ok_or_else(|| ApiError::not_found("job", &id))?;
    let rx = job.subscribe();
    let stream = futures::stream::unfold((job, rx, 0usize, false), |(job, mut rx, cursor, closed)| async move {
        if closed {
            return None;
        }
        loop {
            rx.borrow_and_update();
            let (lines, complete) = job.lines_from(cursor);
            if !lines.is_empty() {
                let next = cursor + lines.len();
                let mut chunk = String::new();
                for l in &lines {
                    chunk.push_str(l);
                    chunk.push('\n');
                }
                return Some((Ok::<_, Infallible>(Bytes::from(chunk)), (job, rx, next, complete)));
            }
            if complete {
                return None;
            }
            if rx.changed().await.is_err() {
                return None;
            }
        }
    });
    Ok(([(header::CONTENT_TYPE, NDJSON)], Body::from_stream(stream)).into_response())
}

#[derive(Deserialize)]
struct ActivationQuery {
    layer: Option<String>,
    class: Option<usize>,
    /// Exemplar of the class, 0–5.
    exemplar: Option<usize>,
    #[serde(rename = "filterSet")]
    filter_set: Option<String>,
}

#[derive(Serialize)]
struct MapPayload {
    name: String,
    pgm: String,
}

#[derive(Serialize)]
struct MapEntry {
    filter: usize,
    pre: MapPayload,
    post: MapPayload,
}

async fn activations(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<ActivationQuery>,
) -> ApiResult<Json<Value>> {
    let s = session(&state, &id)?;
    let (trained, selected) = {
        let data = s.data.lock().unwrap();
        (data.trained.clone(), data.selected_class)
    };
    let trained = trained.ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "no trained model in this session"))?;
    let layer = q
        .layer
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "missing layer parameter"))?;
    let class = q.class.unwrap_or(selected);
    check_class(&state, class)?;
    let all = match q.filter_set.as_deref() {
        None | Some("matrix") => false,
        Some("all") => true,
        Some(other) => {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                format!("filterSet must be matrix or all, got {other}"),
            ))
        }
    };
    let kind = trained
        .model
        .layers()
        .iter()
        .find(|l| l.id == layer)
        .map(|l| l.kind)
        .ok_or_else(|| ApiError::not_found("layer", &layer))?;
    if !matches!(kind, LayerKind::Conv | LayerKind::Pool) {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("layer {layer} is {} and has no spatial activations", layer_kind_name(kind)),
        ));
    }
    let exemplars = state.data().exemplars(class);
    let pick = q.exemplar.unwrap_or(0);
    let index = *exemplars.get(pick).ok_or_else(|| {
        ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("class {class} has {} exemplars", exemplars.len()),
        )
    })?;
    let class_name = state.data().class_names()[class].clone();
    let image_id = format!("{class_name}/{pick}");
    let image = state.data().items()[index].image.clone();
    let set = tokio::task::spawn_blocking(move || extract(&trained, &image, &image_id, Some(class), Some(&layer)))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|e| match e {
            ActivationError::Dimension { .. } => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        })?;
    let target = set.layers.last().expect("requested layer extracted");
    let payload = |filter: usize, phase: Phase, map: &convbench::Tensor| MapPayload {
        name: activations::file_name(&target.id, filter, phase),
        pgm: BASE64.encode(activations::map_pgm(map)),
    };
    let entry = |filter: usize, m: &activations::FilterMap| MapEntry {
        filter,
        pre: payload(filter, Phase::Pre, &m.pre_relu),
        post: payload(filter, Phase::Post, &m.post_relu),
    };
    let maps: Vec<Option<MapEntry>> = if all {
        target.maps.iter().enumerate().map(|(i, m)| Some(entry(i, m))).collect()
    } else {
        matrix_view(&set, &target.id)
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
            .into_iter()
            .enumerate()
            .map(|(i, m)| m.map(|m| entry(i, m)))
            .collect()
    };
    let mut manifest = activations::manifest(&set);
    manifest.layers.retain(|l| l.id == target.id);
    let (height, width) = target.map_dims();
    Ok(Json(json!({
        "layer": target.id,
        "kind": layer_kind_name(target.kind),
        "image_id": set.image_id,
        "class_id": class,
        "class_name": class_name,
        "height": height,
        "width": width,
        "filter_set": if all { "all" } else { "matrix" },
        "default_phase": Phase::Post,
        "maps": maps,
        "manifest": manifest,
    })))
}

async fn history(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let s = session(&state, &id)?;
    let entries = s.data.lock().unwrap().history.clone();
    Ok(Json(json!({ "session": id, "entries": entries })))
}
