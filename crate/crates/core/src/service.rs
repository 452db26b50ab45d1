//! JSON HTTP API over the pipeline and the human-evaluation store.
//!
//! | route | purpose |
//! |---|---|
//! | `POST /detect` | `{meme_id}` or `{meme: {id, image_base64, text, ocr?}}` |
//! | `POST /mitigate` | `{meme_id, choice?, force?}`; 409 for non-hateful memes unless forced |
//! | `GET /review/next?evaluator=ID` | next assigned variant, 204 when none |
//! | `POST /review/{variant_id}/verdict` | `{evaluator_id, q1, q2}`; 409 on duplicates |
//! | `GET /review/{variant_id}/status` | pending / needs-tiebreak / decided |
//! | `GET /report/human` | aggregate report (`?format=text` for the table) |
//! | `GET /report/metrics` | detection metrics over this service's results |
//! | `GET /memes/{id}/image` | PNG of a mitigated variant or an original meme |

use std::collections::{BTreeMap, HashMap};
use std::future::Future;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backend::BackendError;
use crate::detector::{report, DetectFailure, ResultLine};
use crate::human_eval::{EvalError, Status, VerdictRecord, VerdictStore, Q1, Q2};
use crate::mitigator::{MitigateFailure, OutputLine};
use crate::model::{DetectionResult, ImageHandle, Label, MemeRecord, MitigationPlan, MultimodalChoice, Split};
use crate::pipeline::{Pipeline, PipelineError};

pub const EVALUATOR_HEADER: &str = "x-evaluator-id";

pub struct ServiceState {
    pipeline: Arc<Pipeline>,
    memes: HashMap<String, MemeRecord>,
    store: Mutex<VerdictStore>,
    variants: RwLock<HashMap<String, ImageHandle>>,
    detections: Mutex<BTreeMap<String, ResultLine>>,
    /// Failed detections by meme id; the flag marks refusals.
    detect_failures: Mutex<BTreeMap<String, bool>>,
}

impl ServiceState {
    pub fn new(pipeline: Arc<Pipeline>, memes: HashMap<String, MemeRecord>, store: VerdictStore) -> Self {
        ServiceState {
            pipeline,
            memes,
            store: Mutex::new(store),
            variants: RwLock::new(HashMap::new()),
            detections: Mutex::new(BTreeMap::new()),
            detect_failures: Mutex::new(BTreeMap::new()),
        }
    }

    /// Make a composed variant reviewable: serve its image and queue it
    /// for three evaluators.
    pub fn add_variant(&self, variant_id: &str, split: Split, image: ImageHandle) -> Result<(), EvalError> {
        self.variants.write().unwrap().insert(variant_id.to_string(), image);
        self.store.lock().unwrap().enqueue(variant_id, split).map(|_| ())
    }

    /// Load the outputs of an earlier `mitigate` run from its directory.
    pub fn add_outputs_dir(&self, dir: &std::path::Path) -> Result<usize, String> {
        let text = std::fs::read_to_string(dir.join("outputs.jsonl")).map_err(|e| e.to_string())?;
        let mut n = 0;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let out: OutputLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
            let image = ImageHandle::from_path(dir.join(&out.image));
            self.add_variant(&out.variant_id, out.split, image).map_err(|e| e.to_string())?;
            n += 1;
        }
        Ok(n)
    }
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

fn backend_status(e: &BackendError) -> StatusCode {
    match e {
        BackendError::ProviderRefusal(_) => StatusCode::UNPROCESSABLE_ENTITY,
        BackendError::Timeout => StatusCode::GATEWAY_TIMEOUT,
        BackendError::RateLimited => StatusCode::TOO_MANY_REQUESTS,
        _ => StatusCode::BAD_GATEWAY,
    }
}

fn eval_status(e: &EvalError) -> StatusCode {
    match e {
        EvalError::DuplicateVerdict { .. } => StatusCode::CONFLICT,
        EvalError::UnknownVariant(_) => StatusCode::NOT_FOUND,
        EvalError::NotAssigned { .. } => StatusCode::FORBIDDEN,
        EvalError::Io(_) | EvalError::Corrupt { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::BAD_REQUEST,
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(internal)
}

#[derive(Deserialize)]
struct InlineMeme {
    id: String,
    image_base64: String,
    text: String,
    #[serde(default)]
    ocr: Option<String>,
    #[serde(default)]
    label: Option<Label>,
}

#[derive(Deserialize)]
struct DetectRequest {
    #[serde(default)]
    meme_id: Option<String>,
    #[serde(default)]
    meme: Option<InlineMeme>,
}

#[derive(Serialize)]
struct DetectResponse {
    id: String,
    #[serde(flatten)]
    result: DetectionResult,
}

fn lookup(state: &ServiceState, id: &str) -> ApiResult<MemeRecord> {
    state
        .memes
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown meme {id}")))
}

fn inline_record(m: InlineMeme) -> ApiResult<MemeRecord> {
    let bad = |e: String| ApiError(StatusCode::BAD_REQUEST, e);
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(m.image_base64.as_bytes())
        .map_err(|e| bad(format!("image_base64: {e}")))?;
    let image = ImageHandle::from_encoded(&bytes).map_err(|e| bad(e.reason))?;
    let mut rec = MemeRecord::new(m.id, image, m.text);
    rec.ocr_text = m.ocr;
    rec.label = m.label;
    if rec.id.is_empty() {
        return Err(bad("empty meme id".into()));
    }
    Ok(rec)
}

async fn detect(State(state): State<Arc<ServiceState>>, Json(req): Json<DetectRequest>) -> ApiResult<Json<DetectResponse>> {
    let meme = match (req.meme_id, req.meme) {
        (Some(id), None) => lookup(&state, &id)?,
        (None, Some(inline)) => inline_record(inline)?,
        _ => return Err(ApiError(StatusCode::BAD_REQUEST, "give exactly one of meme_id or meme".into())),
    };
    let st = state.clone();
    let m = meme.clone();
    let outcome = blocking(move || st.pipeline.detect_one(&m)).await?;
    match outcome {
        Ok(result) => {
            let scored = crate::detector::Scored {
                id: meme.id.clone(),
                gold: meme.label,
                result: result.clone(),
            };
            state.detect_failures.lock().unwrap().remove(&meme.id);
            state.detections.lock().unwrap().insert(meme.id.clone(), ResultLine::from(&scored));
            Ok(Json(DetectResponse { id: meme.id, result }))
        }
        Err(e) => {
            state.detections.lock().unwrap().remove(&meme.id);
            state.detect_failures.lock().unwrap().insert(meme.id.clone(), e.is_refusal());
            let status = match &e.kind {
                DetectFailure::Backend(b) => backend_status(b),
                DetectFailure::Parse(_) => StatusCode::BAD_GATEWAY,
                _ => StatusCode::BAD_REQUEST,
            };
            Err(ApiError(status, e.to_string()))
        }
    }
}

#[derive(Deserialize)]
struct MitigateRequest {
    meme_id: String,
    #[serde(default)]
    choice: Option<MultimodalChoice>,
    #[serde(default)]
    force: bool,
}

#[derive(Serialize)]
struct OutputView {
    variant_id: String,
    variant: crate::model::Variant,
    split: Split,
    new_text: Option<String>,
    new_image_id: Option<String>,
    image_url: String,
}

#[derive(Serialize)]
struct MitigateResponse {
    plan: MitigationPlan,
    outputs: Vec<OutputView>,
}

fn image_url(id: &str) -> String {
    format!("/memes/{id}/image")
}

async fn mitigate(State(state): State<Arc<ServiceState>>, Json(req): Json<MitigateRequest>) -> ApiResult<Json<MitigateResponse>> {
    let meme = lookup(&state, &req.meme_id)?;
    if meme.label == Some(Label::NonHateful) && !req.force {
        return Err(ApiError(
            StatusCode::CONFLICT,
            format!("meme {} is labeled non-hateful; pass force to mitigate anyway", meme.id),
        ));
    }
    let choice = req.choice.unwrap_or(state.pipeline.config().choice);
    let st = state.clone();
    let outcome = blocking(move || st.pipeline.mitigate_one(&meme, choice)).await?;
    let mitigation = match outcome {
        Err(PipelineError::NoSubstitutes) => {
            return Err(ApiError(StatusCode::SERVICE_UNAVAILABLE, PipelineError::NoSubstitutes.to_string()))
        }
        Err(e) => return Err(internal(e)),
        Ok(Err(e)) => {
            let status = match &e.kind {
                MitigateFailure::Backend(b) => backend_status(b),
                MitigateFailure::Compose(_) => StatusCode::UNPROCESSABLE_ENTITY,
                _ => StatusCode::BAD_GATEWAY,
            };
            return Err(ApiError(status, e.to_string()));
        }
        Ok(Ok(m)) => m,
    };
    let split = mitigation.plan.split();
    let mut outputs = Vec::new();
    for o in &mitigation.outputs {
        let id = o.variant_id();
        state
            .add_variant(&id, split, o.composed_image.clone())
            .map_err(|e| ApiError(eval_status(&e), e.to_string()))?;
        outputs.push(OutputView {
            image_url: image_url(&id),
            variant_id: id,
            variant: o.variant,
            split,
            new_text: o.new_text.clone(),
            new_image_id: o.new_image_id.clone(),
        });
    }
    Ok(Json(MitigateResponse {
        plan: mitigation.plan,
        outputs,
    }))
}

#[derive(Deserialize)]
struct NextQuery {
    evaluator: String,
}

#[derive(Serialize)]
struct ReviewItem {
    variant_id: String,
    variant: String,
    image_url: String,
    status: Status,
}

async fn review_next(State(state): State<Arc<ServiceState>>, Query(q): Query<NextQuery>) -> ApiResult<Response> {
    let store = state.store.lock().unwrap();
    let Some(id) = store.next_for(&q.evaluator) else {
        return Ok(StatusCode::NO_CONTENT.into_response());
    };
    let item = ReviewItem {
        variant_id: id.to_string(),
        variant: id.rsplit('.').next().unwrap_or_default().to_string(),
        image_url: image_url(id),
        status: store.status(id).map_err(internal)?,
    };
    Ok(Json(item).into_response())
}

#[derive(Deserialize)]
struct VerdictRequest {
    #[serde(default)]
    evaluator_id: Option<String>,
    q1: Q1,
    q2: Q2,
}

#[derive(Serialize)]
struct VerdictResponse {
    status: Status,
    tiebreak_assigned: Option<String>,
    /// Caption of the source meme, revealed only once the verdict is in.
    original_text: Option<String>,
}

async fn submit_verdict(
    State(state): State<Arc<ServiceState>>,
    Path(variant_id): Path<String>,
    headers: HeaderMap,
    Json(req): Json<VerdictRequest>,
) -> ApiResult<Json<VerdictResponse>> {
    let evaluator = req
        .evaluator_id
        .or_else(|| headers.get(EVALUATOR_HEADER).and_then(|v| v.to_str().ok()).map(str::to_string))
        .ok_or_else(|| ApiError(StatusCode::BAD_REQUEST, "missing evaluator_id".into()))?;
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let mut store = state.store.lock().unwrap();
    let verdict = VerdictRecord {
        meme_variant_id: variant_id.clone(),
        evaluator_id: evaluator,
        q1: req.q1,
        q2: req.q2,
        ts,
    };
    let to_api = |e: EvalError| ApiError(eval_status(&e), e.to_string());
    let tiebreak_assigned = store.submit(verdict).map_err(to_api)?;
    let status = store.status(&variant_id).map_err(to_api)?;
    let source = variant_id.rsplit_once('.').map_or(variant_id.as_str(), |(m, _)| m);
    Ok(Json(VerdictResponse {
        status,
        tiebreak_assigned,
        original_text: state.memes.get(source).map(|m| m.text.clone()),
    }))
}

async fn review_status(State(state): State<Arc<ServiceState>>, Path(variant_id): Path<String>) -> ApiResult<Json<Status>> {
    let store = state.store.lock().unwrap();
    store
        .status(&variant_id)
        .map(Json)
        .map_err(|e| ApiError(eval_status(&e), e.to_string()))
}

#[derive(Deserialize)]
struct ReportQuery {
    #[serde(default)]
    format: Option<String>,
}

async fn report_human(State(state): State<Arc<ServiceState>>, Query(q): Query<ReportQuery>) -> Response {
    let report = state.store.lock().unwrap().aggregate();
    match q.format.as_deref() {
        Some("text") => ([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], report.to_table()).into_response(),
        _ => Json(report).into_response(),
    }
}

async fn report_metrics(State(state): State<Arc<ServiceState>>) -> Response {
    let lines: Vec<ResultLine> = state.detections.lock().unwrap().values().cloned().collect();
    let failures = state.detect_failures.lock().unwrap();
    let refusals = failures.values().filter(|r| **r).count();
    Json(report(&lines, refusals, failures.len())).into_response()
}

async fn meme_image(State(state): State<Arc<ServiceState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let handle = state
        .variants
        .read()
        .unwrap()
        .get(&id)
        .cloned()
        .or_else(|| state.memes.get(&id).map(|m| m.image.clone()))
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("no image for {id}")))?;
    let png = blocking(move || handle.to_png()).await?.map_err(|e| internal(e.reason))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/detect", post(detect))
        .route("/mitigate", post(mitigate))
        .route("/review/next", get(review_next))
        .route("/review/{variant_id}/verdict", post(submit_verdict))
        .route("/review/{variant_id}/status", get(review_status))
        .route("/report/human", get(report_human))
        .route("/report/metrics", get(report_metrics))
        .route("/memes/{id}/image", get(meme_image))
        .with_state(state)
}

/// Serve until `shutdown` resolves; in-flight requests are drained first.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<ServiceState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}
