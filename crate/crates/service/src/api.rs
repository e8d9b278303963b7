//! HTTP endpoints of the detection sidecar.
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/v1/healthz` | model version and knowledge sizes |
//! | POST | `/v1/traces/{trace_id}/segments` | check one completed segment |
//! | POST | `/v1/traces/{trace_id}/finalize` | trace check, mitigation, review hand-off |
//! | GET | `/v1/traces/{trace_id}` | session state and verdicts |
//! | POST | `/v1/traces/{trace_id}/report` | user-reported failure |
//! | GET | `/v1/reviews` | pending review items |
//! | POST | `/v1/reviews/{trace_id}/verdict` | ingest an expert verdict |
//! | POST | `/v1/reviews/{trace_id}/dismiss` | drop an item without new knowledge |
//! | GET | `/v1/knowledge` | browse entries by tier |
//! | POST | `/v1/knowledge/export`, `/v1/knowledge/import` | JSONL transfer |
//! | POST | `/v1/admin/reload` | reload model and knowledge from disk |
//!
//! Static UI assets are served under `/ui/`.

use std::io::Cursor;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use eager_core::detection::{
    on_segment_complete, on_trace_finalize, DetectionError, DetectionVerdict, SessionState,
    TraceSession,
};
use eager_core::knowledge::{KnowledgeBase, KnowledgeError, Tier};
use eager_core::mitigation::{mitigation_loop, MitigationError, MitigationReport};
use eager_core::rca::{
    ingest_verdict, run_rca, ExpertVerdict, IngestReceipt, RcaError, ReviewItem, ReviewTrigger,
};
use eager_core::trace::{is_valid_role, AgentSegment};
use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::services::ServeDir;

use crate::state::{AppState, KbSizes};

pub const DEFAULT_PAGE_LIMIT: usize = 100;
pub const MAX_PAGE_LIMIT: usize = 1000;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: Value,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl std::fmt::Display) -> Self {
        Self {
            status,
            body: json!({ "error": message.to_string() }),
        }
    }

    fn bad_request(message: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(message: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn internal(message: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<KnowledgeError> for ApiError {
    fn from(e: KnowledgeError) -> Self {
        let status = match e {
            KnowledgeError::VersionMismatch { .. } | KnowledgeError::DimensionMismatch { .. } => {
                StatusCode::SERVICE_UNAVAILABLE
            }
            KnowledgeError::MalformedExport { .. }
            | KnowledgeError::BadMagic
            | KnowledgeError::Corrupt { .. }
            | KnowledgeError::Truncated { .. }
            | KnowledgeError::FormatVersion(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e)
    }
}

impl From<DetectionError> for ApiError {
    fn from(e: DetectionError) -> Self {
        match e {
            DetectionError::OrdinalGap { .. }
            | DetectionError::NotOpen { .. }
            | DetectionError::EmptySession(_) => Self::new(StatusCode::CONFLICT, e),
            DetectionError::MalformedSegment { .. } => Self::bad_request(e),
            DetectionError::Knowledge(k) => k.into(),
            e => Self::internal(e),
        }
    }
}

impl From<MitigationError> for ApiError {
    fn from(e: MitigationError) -> Self {
        match e {
            MitigationError::Detection(d) => d.into(),
            e => Self::internal(e),
        }
    }
}

impl From<RcaError> for ApiError {
    fn from(e: RcaError) -> Self {
        match e {
            RcaError::NotQueued(_) => Self::not_found(e),
            RcaError::ConflictingVerdict(prior) => Self {
                status: StatusCode::CONFLICT,
                body: json!({ "error": "a different verdict was already ingested under this idempotence key", "receipt": prior }),
            },
            RcaError::InvalidVerdict(_) | RcaError::InvalidCulprit { .. } => Self::bad_request(e),
            RcaError::Knowledge(k) => k.into(),
            e => Self::internal(e),
        }
    }
}

impl From<tokio::task::JoinError> for ApiError {
    fn from(e: tokio::task::JoinError) -> Self {
        Self::internal(e)
    }
}

fn parse_json<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

type Shared = Arc<AppState>;

pub fn router(state: Shared) -> Router {
    let ui = ServeDir::new(&state.config.ui_dir).append_index_html_on_directories(true);
    Router::new()
        .route("/v1/healthz", get(healthz))
        .route("/v1/traces/{trace_id}", get(get_trace))
        .route("/v1/traces/{trace_id}/segments", post(post_segment))
        .route("/v1/traces/{trace_id}/finalize", post(finalize))
        .route("/v1/traces/{trace_id}/report", post(report))
        .route("/v1/reviews", get(list_reviews))
        .route("/v1/reviews/{trace_id}/verdict", post(post_verdict))
        .route("/v1/reviews/{trace_id}/dismiss", post(dismiss))
        .route("/v1/knowledge", get(list_knowledge))
        .route("/v1/knowledge/export", post(export_knowledge))
        .route("/v1/knowledge/import", post(import_knowledge))
        .route("/v1/admin/reload", post(reload))
        .nest_service("/ui", ui)
        .with_state(state)
}

// ---------------------------------------------------------------- health

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_version: u64,
    pub kb_sizes: KbSizes,
    pub sessions: usize,
    pub pending_reviews: usize,
}

fn health(st: &AppState) -> Health {
    Health {
        status: "ok".into(),
        model_version: st.snapshot().model.version,
        kb_sizes: st.kb_sizes(),
        sessions: st.session_count(),
        pending_reviews: st.queue.len(),
    }
}

async fn healthz(State(st): State<Shared>) -> Json<Health> {
    Json(health(&st))
}

async fn reload(State(st): State<Shared>) -> Result<Json<Health>, ApiError> {
    let st2 = st.clone();
    tokio::task::spawn_blocking(move || st2.reload())
        .await?
        .map_err(ApiError::internal)?;
    Ok(Json(health(&st)))
}

// ---------------------------------------------------------------- traces

fn validate_segment(seg: &AgentSegment) -> Result<(), ApiError> {
    if !is_valid_role(&seg.agent_role) {
        return Err(ApiError::bad_request(format!(
            "invalid agent_role {:?}",
            seg.agent_role
        )));
    }
    if seg.steps.is_empty() {
        return Err(ApiError::bad_request("segment has no steps"));
    }
    for step in &seg.steps {
        if step.agent_role != seg.agent_role {
            return Err(ApiError::bad_request(format!(
                "step {} has role {:?}, segment is {:?}",
                step.index, step.agent_role, seg.agent_role
            )));
        }
        if step.kind.requires_text() && step.text.trim().is_empty() {
            return Err(ApiError::bad_request(format!(
                "step {} has empty text",
                step.index
            )));
        }
    }
    Ok(())
}

async fn post_segment(
    State(st): State<Shared>,
    Path(trace_id): Path<String>,
    body: Bytes,
) -> Result<Json<DetectionVerdict>, ApiError> {
    let segment: AgentSegment = parse_json(&body)?;
    validate_segment(&segment)?;
    let verdict = tokio::task::spawn_blocking(move || {
        // Only a first segment opens a session; anything else must extend one.
        let session = if segment.segment_ordinal == 0 {
            st.session_or_create(&trace_id)
        } else {
            st.session(&trace_id)
                .unwrap_or_else(|| Arc::new(Mutex::new(TraceSession::new(trace_id.clone()))))
        };
        let snap = st.snapshot();
        let verdict = on_segment_complete(
            &mut session.lock(),
            segment,
            &snap.model,
            &snap.kb,
            &st.detection,
        )?;
        st.log_verdict(&verdict);
        Ok::<_, ApiError>(verdict)
    })
    .await??;
    Ok(Json(verdict))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinalizeResponse {
    #[serde(flatten)]
    pub verdict: DetectionVerdict,
    pub pending_review: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mitigation: Option<MitigationReport>,
}

fn attach_rca(st: &AppState, session: &TraceSession) {
    let snap = st.snapshot();
    match run_rca(&session.to_trace(), &snap.model, &snap.kb, &st.analyzer) {
        Ok(finding) => {
            st.queue.attach_finding(finding);
        }
        Err(e) => {
            tracing::warn!(trace_id = session.trace_id(), error = %e, "root-cause analysis failed")
        }
    }
}

fn finalize_blocking(st: &AppState, trace_id: &str) -> Result<FinalizeResponse, ApiError> {
    let session = st
        .session(trace_id)
        .ok_or_else(|| ApiError::not_found(format!("no session for trace {trace_id}")))?;
    let snap = st.snapshot();
    let mut s = session.lock();
    if s.state() != SessionState::Open {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("trace {trace_id} is already {:?}", s.state()).to_lowercase(),
        ));
    }
    let enabled = st.config.mitigation.enabled;
    let verdict = on_trace_finalize(&mut s, &snap.model, &snap.kb, &st.detection, enabled)?;
    st.log_verdict(&verdict);
    let trigger = s
        .verdicts()
        .iter()
        .find(|v| v.anomalous)
        .cloned()
        .or_else(|| Some(verdict.clone()).filter(|v| v.anomalous));
    let mut mitigation = None;
    if let Some(trigger) = trigger {
        if enabled {
            let report = mitigation_loop(
                &mut s,
                &trigger,
                st.runtime.as_deref(),
                &snap.model,
                &snap.kb,
                &st.detection,
                &st.mitigation,
                &st.queue,
            )?;
            mitigation = Some(report);
        } else {
            st.queue
                .enqueue(trace_id, ReviewTrigger::MitigationUnresolved);
        }
    }
    let pending_review = st.queue.contains(trace_id);
    if pending_review {
        attach_rca(st, &s);
    }
    Ok(FinalizeResponse {
        verdict,
        pending_review,
        mitigation,
    })
}

async fn finalize(
    State(st): State<Shared>,
    Path(trace_id): Path<String>,
) -> Result<Json<FinalizeResponse>, ApiError> {
    let resp = tokio::task::spawn_blocking(move || finalize_blocking(&st, &trace_id)).await??;
    Ok(Json(resp))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceView {
    pub trace_id: String,
    pub state: SessionState,
    pub segments: Vec<AgentSegment>,
    pub verdicts: Vec<DetectionVerdict>,
    pub trace_verdict: Option<DetectionVerdict>,
    pub review: Option<ReviewItem>,
}

async fn get_trace(
    State(st): State<Shared>,
    Path(trace_id): Path<String>,
) -> Result<Json<TraceView>, ApiError> {
    let session = st
        .session(&trace_id)
        .ok_or_else(|| ApiError::not_found(format!("no session for trace {trace_id}")))?;
    let s = session.lock();
    Ok(Json(TraceView {
        trace_id: trace_id.clone(),
        state: s.state(),
        segments: s.segments().to_vec(),
        verdicts: s.verdicts().to_vec(),
        trace_verdict: s.trace_verdict().cloned(),
        review: st.queue.get(&trace_id),
    }))
}

async fn report(
    State(st): State<Shared>,
    Path(trace_id): Path<String>,
) -> Result<Json<ReviewItem>, ApiError> {
    let item = tokio::task::spawn_blocking(move || {
        let session = st
            .session(&trace_id)
            .ok_or_else(|| ApiError::not_found(format!("no session for trace {trace_id}")))?;
        let s = session.lock();
        if s.segments().is_empty() {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("trace {trace_id} has no segments"),
            ));
        }
        st.queue.enqueue(&trace_id, ReviewTrigger::UserReported);
        attach_rca(&st, &s);
        st.queue
            .get(&trace_id)
            .ok_or_else(|| ApiError::internal("review item vanished"))
    })
    .await??;
    Ok(Json(item))
}

// --------------------------------------------------------------- reviews

#[derive(Debug, Clone, Copy, Default, Deserialize)]
pub struct PageQuery {
    pub offset: Option<usize>,
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Page<T> {
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub items: Vec<T>,
}

fn paginate<T>(all: Vec<T>, q: PageQuery) -> Page<T> {
    let offset = q.offset.unwrap_or(0);
    let limit = q.limit.unwrap_or(DEFAULT_PAGE_LIMIT).min(MAX_PAGE_LIMIT);
    let total = all.len();
    let items = all.into_iter().skip(offset).take(limit).collect();
    Page {
        total,
        offset,
        limit,
        items,
    }
}

async fn list_reviews(
    State(st): State<Shared>,
    Query(q): Query<PageQuery>,
) -> Json<Page<ReviewItem>> {
    Json(paginate(st.queue.pending(), q))
}

async fn post_verdict(
    State(st): State<Shared>,
    Path(trace_id): Path<String>,
    body: Bytes,
) -> Result<Json<IngestReceipt>, ApiError> {
    let verdict: ExpertVerdict = parse_json(&body)?;
    if verdict.trace_id != trace_id {
        return Err(ApiError::bad_request(format!(
            "verdict is for {:?}, path names {trace_id:?}",
            verdict.trace_id
        )));
    }
    let receipt = tokio::task::spawn_blocking(move || {
        let trace = match st.session(&trace_id) {
            Some(s) => s.lock().to_trace(),
            None => {
                return Err(ApiError::not_found(format!(
                    "trace {trace_id} is not queued for review"
                )))
            }
        };
        let finding = st.queue.get(&trace_id).and_then(|i| i.finding);
        st.update_kb(|kb, model| {
            ingest_verdict(kb, &st.queue, &trace, finding.as_ref(), &verdict, model).map(|r| {
                let changed = !r.replayed;
                (r, changed)
            })
        })
        .map_err(ApiError::from)
    })
    .await??;
    Ok(Json(receipt))
}

async fn dismiss(
    State(st): State<Shared>,
    Path(trace_id): Path<String>,
) -> Result<Json<ReviewItem>, ApiError> {
    st.queue
        .dismiss(&trace_id)
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("trace {trace_id} is not queued for review")))
}

// ------------------------------------------------------------- knowledge

#[derive(Debug, Clone, Copy, Default, Deserialize)]
pub struct KnowledgeQuery {
    pub tier: Option<Tier>,
    pub offset: Option<usize>,
    pub limit: Option<usize>,
}

fn without_embedding<T: Serialize>(entry: &T) -> Value {
    let mut v = serde_json::to_value(entry).expect("entries serialize");
    if let Some(obj) = v.as_object_mut() {
        obj.remove("embedding");
    }
    v
}

async fn list_knowledge(
    State(st): State<Shared>,
    Query(q): Query<KnowledgeQuery>,
) -> Json<Page<Value>> {
    let snap = st.snapshot();
    let entries: Vec<Value> = match q.tier.unwrap_or(Tier::Fine) {
        Tier::Fine => snap.kb.fine().iter().map(without_embedding).collect(),
        Tier::Coarse => snap.kb.coarse().iter().map(without_embedding).collect(),
    };
    Json(paginate(
        entries,
        PageQuery {
            offset: q.offset,
            limit: q.limit,
        },
    ))
}

async fn export_knowledge(State(st): State<Shared>) -> Result<Response, ApiError> {
    let mut out = Vec::new();
    st.snapshot()
        .kb
        .export_text(&mut out)
        .map_err(ApiError::internal)?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], out).into_response())
}

async fn import_knowledge(
    State(st): State<Shared>,
    body: Bytes,
) -> Result<Json<KbSizes>, ApiError> {
    let imported = KnowledgeBase::import_text(Cursor::new(body.as_ref()))?;
    let sizes = tokio::task::spawn_blocking(move || {
        st.update_kb(|kb, model| {
            if imported.model_version() != model.version {
                return Err(ApiError::new(
                    StatusCode::CONFLICT,
                    format!(
                        "export was built with model version {}, serving {}",
                        imported.model_version(),
                        model.version
                    ),
                ));
            }
            *kb = imported;
            Ok(((), true))
        })?;
        Ok::<_, ApiError>(st.kb_sizes())
    })
    .await??;
    Ok(Json(sizes))
}
