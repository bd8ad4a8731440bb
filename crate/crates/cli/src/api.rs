//! Versioned HTTP API (`/v1`) over run stores, guideline versions and error tags.
//!
//! Past run records are read-only here. Draft probes call the classifier
//! directly with interactive priority and log to a scratch transcript, never
//! to a run directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use memelens_core::classifier::{self, ClassifyRequest};
use memelens_core::gateway::Priority;
use memelens_core::guidelines::{diff_rules, GuidelineError, GuidelineStore, RuleDiff};
use memelens_core::meme2text::Description;
use memelens_core::pipeline::{DecisionPayload, RunConfig, TargetPayload};
use memelens_core::runstore::{list_runs, RunStore, RunStoreError, Stage, StageRecord};
use memelens_core::{
    ExtractionStatus, Gateway, GuidelineSet, Label, MemeRecord, Scheme, SchemeVerdict,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// Directory under the runs root holding workbench state. The leading dot
/// keeps it out of the run-id namespace.
pub const WORKBENCH_DIR: &str = ".workbench";

pub struct AppState {
    pub runs_root: PathBuf,
    pub guidelines: GuidelineStore,
    /// Shared with nothing else; its transcript is the scratch log.
    pub gateway: Gateway,
    pub token: Option<String>,
    save_lock: tokio::sync::Mutex<()>,
    tag_lock: tokio::sync::Mutex<()>,
}

impl AppState {
    pub fn new(runs_root: PathBuf, guidelines: GuidelineStore, gateway: Gateway, token: Option<String>) -> Self {
        Self {
            runs_root,
            guidelines,
            gateway,
            token,
            save_lock: tokio::sync::Mutex::new(()),
            tag_lock: tokio::sync::Mutex::new(()),
        }
    }

    pub fn workbench_dir(&self) -> PathBuf {
        self.runs_root.join(WORKBENCH_DIR)
    }

    fn tags_path(&self) -> PathBuf {
        self.workbench_dir().join("error_tags.jsonl")
    }
}

#[derive(Debug, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    fn invalid(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    fn body(&self) -> Value {
        json!({"code": self.code, "message": self.message})
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.body()}))).into_response()
    }
}

impl From<RunStoreError> for ApiError {
    fn from(e: RunStoreError) -> Self {
        match e {
            RunStoreError::NotFound(_) => ApiError::not_found(e.to_string()),
            RunStoreError::InvalidRunId(_) => ApiError::invalid("invalid_run_id", e.to_string()),
            other => ApiError::internal(other.to_string()),
        }
    }
}

impl From<GuidelineError> for ApiError {
    fn from(e: GuidelineError) -> Self {
        match e {
            GuidelineError::NotFound { .. } => ApiError::not_found(e.to_string()),
            GuidelineError::Invalid { .. } => ApiError::invalid("invalid_guidelines", e.to_string()),
            other => ApiError::internal(other.to_string()),
        }
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/runs", get(runs))
        .route("/runs/{run_id}/memes", get(memes))
        .route("/runs/{run_id}/memes/{meme_id}", get(meme_detail))
        .route("/runs/{run_id}/memes/{meme_id}/verdicts", get(verdicts))
        .route("/runs/{run_id}/report", get(report))
        .route("/draft-runs", axum::routing::post(draft_run))
        .route("/compare", axum::routing::post(compare))
        .route("/guidelines", get(guideline_ids))
        .route(
            "/guidelines/{guideline_id}/versions",
            get(guideline_versions).post(save_guideline),
        )
        .route("/guidelines/{guideline_id}/versions/{version}", get(guideline_version))
        .route("/guidelines/{guideline_id}/diff", get(guideline_diff))
        .route("/error-tags", get(list_tags).post(add_tag))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/v1/health", get(|| async { Json(json!({"status": "ok"})) }))
        .nest("/v1", api)
        .with_state(state)
}

async fn require_token(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let given = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if given != Some(token.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token")
                .into_response();
        }
    }
    next.run(req).await
}

// ------------------------------------------------------------------- runs

fn open_run(state: &AppState, run_id: &str) -> Result<RunStore, ApiError> {
    Ok(RunStore::open(&state.runs_root, run_id)?)
}

fn run_config(store: &RunStore) -> Result<RunConfig, ApiError> {
    let cfg = store
        .manifest()
        .config
        .get("config")
        .cloned()
        .ok_or_else(|| ApiError::internal("run manifest carries no configuration"))?;
    serde_json::from_value(cfg).map_err(|e| ApiError::internal(format!("run configuration: {e}")))
}

fn run_memes(store: &RunStore) -> Result<Vec<MemeRecord>, ApiError> {
    let path = store.dir().join("memes.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| ApiError::internal(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))
}

fn find_meme(store: &RunStore, meme_id: &str) -> Result<MemeRecord, ApiError> {
    run_memes(store)?
        .into_iter()
        .find(|m| m.meme_id == meme_id)
        .ok_or_else(|| ApiError::not_found(format!("meme {meme_id} is not part of run {}", store.run_id())))
}

/// Latest payload per slot for one meme.
fn payloads(store: &RunStore, stage: Stage, meme_id: &str) -> BTreeMap<String, Value> {
    let mut out = BTreeMap::new();
    for r in store.records(stage).into_iter().filter(|r| r.meme_id == meme_id) {
        out.insert(r.slot, r.payload);
    }
    out
}

#[derive(Serialize)]
struct RunSummary {
    run_id: String,
    created_at: DateTime<Utc>,
    contexts: Vec<memelens_core::ContextId>,
    config_digest: String,
}

async fn runs(State(state): State<Arc<AppState>>) -> ApiResult<Vec<RunSummary>> {
    let mut out = Vec::new();
    for id in list_runs(&state.runs_root)? {
        let store = open_run(&state, &id)?;
        let m = store.manifest();
        out.push(RunSummary {
            run_id: m.run_id.clone(),
            created_at: m.created_at,
            contexts: m.contexts.clone(),
            config_digest: m.config_digest.clone(),
        });
    }
    Ok(Json(out))
}

async fn memes(State(state): State<Arc<AppState>>, UrlPath(run_id): UrlPath<String>) -> ApiResult<Vec<MemeRecord>> {
    Ok(Json(run_memes(&open_run(&state, &run_id)?)?))
}

#[derive(Serialize)]
struct MemeDetail {
    meme: MemeRecord,
    cues: BTreeMap<String, Value>,
    descriptions: BTreeMap<String, Value>,
    targets: BTreeMap<String, Value>,
}

async fn meme_detail(
    State(state): State<Arc<AppState>>,
    UrlPath((run_id, meme_id)): UrlPath<(String, String)>,
) -> ApiResult<MemeDetail> {
    let store = open_run(&state, &run_id)?;
    Ok(Json(MemeDetail {
        meme: find_meme(&store, &meme_id)?,
        cues: payloads(&store, Stage::Cues, &meme_id),
        descriptions: payloads(&store, Stage::Description, &meme_id),
        targets: payloads(&store, Stage::Target, &meme_id),
    }))
}

#[derive(Serialize)]
struct MemeVerdicts {
    meme_id: String,
    verdicts: BTreeMap<String, SchemeVerdict>,
    decision: Option<DecisionPayload>,
}

async fn verdicts(
    State(state): State<Arc<AppState>>,
    UrlPath((run_id, meme_id)): UrlPath<(String, String)>,
) -> ApiResult<MemeVerdicts> {
    let store = open_run(&state, &run_id)?;
    find_meme(&store, &meme_id)?;
    let mut verdicts = BTreeMap::new();
    for (slot, payload) in payloads(&store, Stage::Verdict, &meme_id) {
        let v = serde_json::from_value(payload).map_err(|e| ApiError::internal(e.to_string()))?;
        verdicts.insert(slot, v);
    }
    let decision = store
        .latest(Stage::Decision, &meme_id, "")
        .map(|r| serde_json::from_value(r.payload))
        .transpose()
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(Json(MemeVerdicts {
        meme_id,
        verdicts,
        decision,
    }))
}

async fn report(State(state): State<Arc<AppState>>, UrlPath(run_id): UrlPath<String>) -> ApiResult<Value> {
    let store = open_run(&state, &run_id)?;
    let path = store.dir().join("report.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|_| ApiError::not_found(format!("run {run_id} has no report yet")))?;
    serde_json::from_str(&text)
        .map(Json)
        .map_err(|e| ApiError::internal(e.to_string()))
}

// ----------------------------------------------------------------- probes

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProbeResult {
    pub meme_id: String,
    pub label: Label,
    pub label_token: String,
    pub rationale: String,
    pub extraction_status: ExtractionStatus,
    pub guideline_version: String,
    pub source_lmm: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeOutcome {
    pub meme_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<ProbeResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<Value>,
}

impl ProbeOutcome {
    fn from_result(meme_id: &str, r: Result<ProbeResult, ApiError>) -> Self {
        match r {
            Ok(result) => Self {
                meme_id: meme_id.to_string(),
                result: Some(result),
                error: None,
            },
            Err(e) => Self {
                meme_id: meme_id.to_string(),
                result: None,
                error: Some(e.body()),
            },
        }
    }

    fn label(&self) -> Option<Label> {
        self.result.as_ref().map(|r| r.label)
    }
}

/// Everything a probe needs from a stored run, loaded once per request.
struct ProbeContext {
    store: RunStore,
    config: RunConfig,
    source: String,
}

fn probe_context(state: &AppState, run_id: &str, source: Option<&str>) -> Result<ProbeContext, ApiError> {
    let store = open_run(state, run_id)?;
    let config = run_config(&store)?;
    let source = match source {
        Some(s) if config.vision_sources.iter().any(|v| v.endpoint == s) => s.to_string(),
        Some(s) => return Err(ApiError::invalid("unknown_source", format!("run {run_id} has no vision source {s}"))),
        None => config
            .vision_sources
            .first()
            .map(|v| v.endpoint.clone())
            .ok_or_else(|| ApiError::internal("run has no vision sources"))?,
    };
    Ok(ProbeContext { store, config, source })
}

fn parse_payload<T: for<'de> Deserialize<'de>>(r: StageRecord) -> Result<T, ApiError> {
    serde_json::from_value(r.payload).map_err(|e| ApiError::internal(e.to_string()))
}

/// Classifies one stored meme description under `guidelines` without caching.
async fn probe(state: &AppState, ctx: &ProbeContext, meme_id: &str, guidelines: &GuidelineSet) -> Result<ProbeResult, ApiError> {
    let meme = find_meme(&ctx.store, meme_id)?;
    let description: Description = ctx
        .store
        .latest(Stage::Description, meme_id, &ctx.source)
        .ok_or_else(|| ApiError::not_found(format!("meme {meme_id} has no description from {}", ctx.source)))
        .and_then(parse_payload)?;
    let target: Option<TargetPayload> = ctx
        .store
        .latest(Stage::Target, meme_id, &ctx.source)
        .map(parse_payload)
        .transpose()?;
    let templates = ctx
        .config
        .load_templates()
        .map_err(|e| ApiError::internal(e.to_string()))?;
    let scheme = Scheme::UCoTPlus;
    let req = ClassifyRequest {
        meme_id: meme_id.to_string(),
        scheme,
        context: ctx.config.context,
        description: Some(description.high_fidelity_text),
        image_ref: None,
        ocr_text: meme.ocr_text,
        guidelines: Some(match &target {
            Some(t) => t.apply(guidelines),
            None => guidelines.clone(),
        }),
        exemplars: None,
        cot_trigger: ctx
            .config
            .cot_trigger
            .clone()
            .unwrap_or_else(|| classifier::default_trigger(scheme, &templates)),
        pride_variant: target.as_ref().and_then(TargetPayload::pride_variant),
    };
    let endpoint = ctx
        .config
        .reasoning_endpoint()
        .map_err(|e| ApiError::internal(e.to_string()))?;
    let verdict = classifier::classify(
        &state.gateway,
        &req,
        endpoint,
        &ctx.config.text_decoding(),
        &templates,
        &ctx.source,
        Priority::Interactive,
    )
    .await
    .map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, "classification_failed", e.to_string()))?;
    Ok(ProbeResult {
        meme_id: meme_id.to_string(),
        label: verdict.label,
        label_token: ctx.config.context.context().label_lexicon.token(verdict.label).to_string(),
        rationale: verdict.rationale,
        extraction_status: verdict.extraction_status,
        guideline_version: guidelines.version.clone(),
        source_lmm: ctx.source.clone(),
    })
}

async fn probe_all(state: &AppState, ctx: &ProbeContext, meme_ids: &[String], set: &GuidelineSet) -> Vec<ProbeOutcome> {
    let jobs = meme_ids.iter().map(|id| async move {
        ProbeOutcome::from_result(id, probe(state, ctx, id, set).await)
    });
    futures::future::join_all(jobs).await
}

fn check_draft(ctx: &ProbeContext, set: &GuidelineSet) -> Result<(), ApiError> {
    set.validate()?;
    if set.context.family() != ctx.config.context.family() {
        return Err(ApiError::invalid(
            "context_mismatch",
            format!("guidelines are for {}, run {} is {}", set.context, ctx.store.run_id(), ctx.config.context),
        ));
    }
    Ok(())
}

#[derive(Deserialize)]
struct DraftRunRequest {
    run_id: String,
    meme_ids: Vec<String>,
    guidelines: GuidelineSet,
    #[serde(default)]
    source: Option<String>,
}

#[derive(Serialize)]
struct DraftRunResponse {
    run_id: String,
    results: Vec<ProbeOutcome>,
}

async fn draft_run(State(state): State<Arc<AppState>>, Json(body): Json<DraftRunRequest>) -> ApiResult<DraftRunResponse> {
    if body.meme_ids.is_empty() {
        return Err(ApiError::invalid("no_memes", "meme_ids is empty"));
    }
    let ctx = probe_context(&state, &body.run_id, body.source.as_deref())?;
    check_draft(&ctx, &body.guidelines)?;
    let results = probe_all(&state, &ctx, &body.meme_ids, &body.guidelines).await;
    Ok(Json(DraftRunResponse {
        run_id: body.run_id,
        results,
    }))
}

#[derive(Deserialize)]
struct CompareRequest {
    run_id: String,
    meme_ids: Vec<String>,
    guideline_id: String,
    a: String,
    b: String,
    #[serde(default)]
    source: Option<String>,
}

#[derive(Serialize)]
struct ComparedMeme {
    meme_id: String,
    a: ProbeOutcome,
    b: ProbeOutcome,
    changed: bool,
}

#[derive(Serialize)]
struct CompareResponse {
    guideline_id: String,
    a: String,
    b: String,
    diff: Vec<RuleDiff>,
    memes: Vec<ComparedMeme>,
}

async fn compare(State(state): State<Arc<AppState>>, Json(body): Json<CompareRequest>) -> ApiResult<CompareResponse> {
    let set_a = state.guidelines.load(&body.guideline_id, &body.a)?;
    let set_b = state.guidelines.load(&body.guideline_id, &body.b)?;
    let ctx = probe_context(&state, &body.run_id, body.source.as_deref())?;
    check_draft(&ctx, &set_a)?;
    let (ra, rb) = futures::join!(
        probe_all(&state, &ctx, &body.meme_ids, &set_a),
        probe_all(&state, &ctx, &body.meme_ids, &set_b)
    );
    let memes = ra
        .into_iter()
        .zip(rb)
        .map(|(a, b)| ComparedMeme {
            meme_id: a.meme_id.clone(),
            changed: a.label().is_some() && b.label().is_some() && a.label() != b.label(),
            a,
            b,
        })
        .collect();
    Ok(Json(CompareResponse {
        diff: diff_rules(&set_a, &set_b),
        guideline_id: body.guideline_id,
        a: set_a.version,
        b: set_b.version,
        memes,
    }))
}

// ------------------------------------------------------------- guidelines

async fn guideline_ids(State(state): State<Arc<AppState>>) -> ApiResult<Vec<String>> {
    Ok(Json(state.guidelines.ids()?))
}

async fn guideline_versions(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Vec<u32>> {
    let versions = state.guidelines.versions(&id)?;
    if versions.is_empty() {
        return Err(ApiError::not_found(format!("no guideline set {id}")));
    }
    Ok(Json(versions))
}

async fn guideline_version(
    State(state): State<Arc<AppState>>,
    UrlPath((id, version)): UrlPath<(String, String)>,
) -> ApiResult<GuidelineSet> {
    let set = if version == "latest" {
        state.guidelines.latest(&id)?
    } else {
        state.guidelines.load(&id, &version)?
    };
    Ok(Json(set))
}

async fn save_guideline(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(set): Json<GuidelineSet>,
) -> Result<(StatusCode, Json<GuidelineSet>), ApiError> {
    if set.guideline_id != id {
        return Err(ApiError::invalid(
            "id_mismatch",
            format!("body is for {}, path is {id}", set.guideline_id),
        ));
    }
    let _guard = state.save_lock.lock().await;
    let stored = state.guidelines.save(&set)?;
    tracing::info!(guideline = %id, version = %stored.version, "saved guideline version");
    Ok((StatusCode::CREATED, Json(stored)))
}

#[derive(Deserialize)]
struct DiffQuery {
    a: String,
    b: String,
}

async fn guideline_diff(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<DiffQuery>,
) -> ApiResult<Vec<RuleDiff>> {
    let a = state.guidelines.load(&id, &q.a)?;
    let b = state.guidelines.load(&id, &q.b)?;
    Ok(Json(diff_rules(&a, &b)))
}

// ------------------------------------------------------------- error tags

/// The six error categories used when reviewing wrong verdicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ErrorType {
    IncorrectMissingVisual,
    ExcessiveCensorship,
    Misinterpretation,
    DifferentInterpretation,
    TargetMismatch,
    BlindSpot,
}

impl ErrorType {
    pub const ALL: [ErrorType; 6] = [
        ErrorType::IncorrectMissingVisual,
        ErrorType::ExcessiveCensorship,
        ErrorType::Misinterpretation,
        ErrorType::DifferentInterpretation,
        ErrorType::TargetMismatch,
        ErrorType::BlindSpot,
    ];
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ErrorTag {
    pub meme_id: String,
    pub run_id: String,
    #[serde(rename = "type")]
    pub error_type: ErrorType,
    #[serde(default)]
    pub note: String,
    pub author: String,
    pub created_at: DateTime<Utc>,
}

#[derive(Deserialize)]
struct NewTag {
    meme_id: String,
    run_id: String,
    #[serde(rename = "type")]
    error_type: String,
    #[serde(default)]
    note: String,
    author: String,
}

fn read_tags(path: &Path) -> Result<Vec<ErrorTag>, ApiError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(|e| ApiError::internal(e.to_string()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| ApiError::internal(format!("{}: {e}", path.display()))))
        .collect()
}

async fn add_tag(State(state): State<Arc<AppState>>, Json(body): Json<NewTag>) -> Result<(StatusCode, Json<ErrorTag>), ApiError> {
    let error_type: ErrorType = serde_json::from_value(Value::String(body.error_type.clone())).map_err(|_| {
        ApiError::invalid(
            "unknown_error_type",
            format!("{:?} is not one of {:?}", body.error_type, ErrorType::ALL),
        )
    })?;
    if body.author.trim().is_empty() {
        return Err(ApiError::invalid("missing_author", "author is required"));
    }
    let store = open_run(&state, &body.run_id)?;
    if !store.records(Stage::Verdict).iter().any(|r| r.meme_id == body.meme_id) {
        return Err(ApiError::invalid(
            "no_verdict",
            format!("run {} has no verdict for meme {}", body.run_id, body.meme_id),
        ));
    }
    let tag = ErrorTag {
        meme_id: body.meme_id,
        run_id: body.run_id,
        error_type,
        note: body.note,
        author: body.author,
        created_at: Utc::now(),
    };
    let _guard = state.tag_lock.lock().await;
    let path = state.tags_path();
    let write = || -> std::io::Result<()> {
        use std::io::Write;
        std::fs::create_dir_all(state.workbench_dir())?;
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&path)?;
        writeln!(f, "{}", serde_json::to_string(&tag).expect("tag serializes"))
    };
    write().map_err(|e| ApiError::internal(format!("writing {}: {e}", path.display())))?;
    Ok((StatusCode::CREATED, Json(tag)))
}

#[derive(Deserialize)]
struct TagQuery {
    #[serde(default)]
    run_id: Option<String>,
}

#[derive(Serialize)]
struct TagListing {
    tags: Vec<ErrorTag>,
    distribution: BTreeMap<ErrorType, usize>,
    total: usize,
}

async fn list_tags(State(state): State<Arc<AppState>>, Query(q): Query<TagQuery>) -> ApiResult<TagListing> {
    let tags: Vec<ErrorTag> = read_tags(&state.tags_path())?
        .into_iter()
        .filter(|t| q.run_id.as_ref().is_none_or(|r| &t.run_id == r))
        .collect();
    let mut distribution: BTreeMap<ErrorType, usize> = ErrorType::ALL.iter().map(|t| (*t, 0)).collect();
    for t in &tags {
        *distribution.entry(t.error_type).or_default() += 1;
    }
    Ok(Json(TagListing {
        total: tags.len(),
        distribution,
        tags,
    }))
}
