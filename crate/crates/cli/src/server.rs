//! The HTTP API. JSON everywhere except the event streams, which are
//! newline-delimited JSON, and the WebVTT export.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Redirect, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::StreamExt;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tower_http::services::ServeDir;
use tower_http::trace::TraceLayer;
use vidscript_core::agent::{AgentError, Steering};
use vidscript_core::knowledge::{load_gallery, parse_meta_pair, KnowledgeError};
use vidscript_core::pipeline::{EventSink, JobError, PipelineError, PipelineEvent};
use vidscript_core::transcript::file_sha256;
use vidscript_core::{KnowledgePack, Pipeline, Stage};

use crate::episodes::{self, Episodes, StartEpisode, SteerError};
use crate::hub::{Hub, Subscription};
use crate::options::JobOptions;

const UPLOAD_LIMIT: usize = 4 << 30;
const NDJSON: &str = "application/x-ndjson";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self { status, body: ErrorBody { code: code.into(), message: message.into(), stage: None, detail: None } }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "InvalidInput", message)
    }

    fn detail(mut self, detail: impl Into<String>) -> Self {
        self.body.detail = Some(detail.into());
        self
    }
}

/// Status for a stable error code.
fn status_for(code: &str) -> StatusCode {
    match code {
        "UnknownJob" | "UnknownEpisode" | "ArtifactMissing" => StatusCode::NOT_FOUND,
        "JobNotDone" | "JobTerminal" | "StaleStep" | "NoPendingAction" => StatusCode::CONFLICT,
        "FileNotFound" | "InvalidConfig" | "InvalidInput" | "EmptyCorpus" | "UnknownVideoId" | "DuplicateVideoId"
        | "DuplicateName" | "GalleryTooLarge" | "UnreadableImage" | "InvalidAction" | "UnsupportedFormat" => {
            StatusCode::BAD_REQUEST
        }
        "StoreUnavailable" | "BackendUnavailable" | "RateLimitExceeded" => StatusCode::SERVICE_UNAVAILABLE,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let code = e.code().to_string();
        let mut err = ApiError::new(status_for(&code), &code, e.to_string());
        if let PipelineError::JobNotDone { stage, .. } | PipelineError::JobTerminal { stage, .. } = &e {
            err.body.stage = Some(*stage);
        }
        err
    }
}

impl From<KnowledgeError> for ApiError {
    fn from(e: KnowledgeError) -> Self {
        ApiError::new(status_for(e.code()), e.code(), e.to_string())
    }
}

impl From<AgentError> for ApiError {
    fn from(e: AgentError) -> Self {
        ApiError::new(status_for(e.code()), e.code(), e.to_string())
    }
}

impl From<SteerError> for ApiError {
    fn from(e: SteerError) -> Self {
        match e {
            SteerError::NoPendingAction => {
                ApiError::new(StatusCode::CONFLICT, "NoPendingAction", "no action is awaiting review")
            }
            SteerError::StaleStep { pending, got } => {
                ApiError::new(StatusCode::CONFLICT, "StaleStep", format!("step {got} is not awaiting review"))
                    .detail(format!("pending step is {pending}"))
            }
            SteerError::InvalidAction(name) => {
                ApiError::new(StatusCode::BAD_REQUEST, "InvalidAction", format!("{name:?} is not an allowed action"))
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse_json<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))
}

pub fn job_topic(job_id: &str) -> String {
    format!("job/{job_id}")
}

/// Forwards pipeline events to the job's topic.
pub struct HubSink(pub Arc<Hub>);

impl EventSink for HubSink {
    fn emit(&self, event: &PipelineEvent) {
        self.0.publish(&job_topic(event.job_id()), serde_json::to_string(event).expect("events serialize"));
    }
}

pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub console_dir: PathBuf,
    pub max_jobs: usize,
    pub review_timeout: Duration,
}

pub struct AppState {
    pipeline: Arc<Pipeline>,
    hub: Arc<Hub>,
    episodes: Arc<Episodes>,
    upload_dir: PathBuf,
    slots: Arc<Semaphore>,
    running: Mutex<HashSet<String>>,
}

impl AppState {
    /// `pipeline` must publish to `hub` (see [`HubSink`]).
    pub fn new(pipeline: Arc<Pipeline>, hub: Arc<Hub>, config: &ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            pipeline,
            episodes: Arc::new(Episodes::new(hub.clone(), &config.data_dir.join("episodes"), config.review_timeout)),
            hub,
            upload_dir: config.data_dir.join("uploads"),
            slots: Arc::new(Semaphore::new(config.max_jobs.max(1))),
            running: Mutex::new(HashSet::new()),
        })
    }

    /// Runs a job to a terminal stage in the background, at most
    /// `max_jobs` at a time. A job already running is left alone.
    pub fn spawn_job(self: &Arc<Self>, job_id: String) {
        if !self.running.lock().expect("running lock").insert(job_id.clone()) {
            return;
        }
        let topic = job_topic(&job_id);
        self.hub.open(&topic);
        let state = self.clone();
        tokio::spawn(async move {
            let _permit = state.slots.clone().acquire_owned().await.expect("semaphore never closed");
            let pipeline = state.pipeline.clone();
            let id = job_id.clone();
            let result = tokio::task::spawn_blocking(move || pipeline.run_to_completion(&id)).await;
            let failure = match result {
                Ok(Ok(_)) => None,
                Ok(Err(e)) => Some((e.code().to_string(), e.to_string())),
                Err(e) => Some(("Internal".to_string(), e.to_string())),
            };
            if let Some((code, message)) = failure {
                // the job record could not be updated; tell subscribers anyway
                tracing::error!(job = %job_id, %code, %message, "job worker stopped");
                let stage = state.pipeline.job(&job_id).map(|j| j.stage).unwrap_or(Stage::Queued);
                let event = PipelineEvent::JobFailed { job_id: job_id.clone(), error: JobError { code, message, stage, detail: None } };
                state.hub.publish(&topic, serde_json::to_string(&event).expect("events serialize"));
            }
            state.hub.close(&topic);
            state.running.lock().expect("running lock").remove(&job_id);
        });
    }

    /// Picks up jobs left unfinished by an earlier run.
    pub fn resume_unfinished(self: &Arc<Self>) -> Result<usize, PipelineError> {
        let pending: Vec<String> =
            self.pipeline.store().jobs()?.into_iter().filter(|j| !j.stage.is_terminal()).map(|j| j.job_id).collect();
        for id in &pending {
            self.spawn_job(id.clone());
        }
        Ok(pending.len())
    }
}

pub fn router(state: Arc<AppState>, console_dir: &Path) -> Router {
    Router::new()
        .route("/", get(|| async { Redirect::temporary("/console/") }))
        .route("/console", get(|| async { Redirect::permanent("/console/") }))
        .nest_service("/console/", ServeDir::new(console_dir).append_index_html_on_directories(true))
        .route("/v1/jobs", post(submit_job).get(list_jobs))
        .route("/v1/jobs/{id}", get(get_job))
        .route("/v1/jobs/{id}/script", get(get_script))
        .route("/v1/jobs/{id}/ad.vtt", get(get_ad))
        .route("/v1/jobs/{id}/events", get(job_events))
        .route("/v1/qa", post(qa))
        .route("/v1/agent", post(start_agent))
        .route("/v1/agent/{episode}/events", get(agent_events))
        .route("/v1/agent/{episode}/action", post(agent_action))
        .layer(DefaultBodyLimit::max(UPLOAD_LIMIT))
        .layer(TraceLayer::new_for_http())
        .with_state(state)
}

fn ndjson(sub: Subscription) -> Response {
    let body = Body::from_stream(sub.into_stream().map(|mut l| {
        l.push('\n');
        Ok::<_, std::convert::Infallible>(l)
    }));
    ([(header::CONTENT_TYPE, NDJSON), (header::CACHE_CONTROL, "no-cache")], body).into_response()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Submitted {
    pub job_id: String,
    pub stage: Stage,
}

#[derive(Default)]
struct Form {
    video: Option<PathBuf>,
    pack: crate::options::PackOptions,
    faces: Option<tempfile::TempDir>,
    job: JobOptions,
}

fn parse_field<T: std::str::FromStr>(name: &str, value: &str) -> ApiResult<T> {
    value.trim().parse().map_err(|_| ApiError::bad_request(format!("field {name:?} has an invalid value {value:?}")))
}

fn parse_flag(name: &str, value: &str) -> ApiResult<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "" | "1" | "true" | "on" | "yes" => Ok(true),
        "0" | "false" | "off" | "no" => Ok(false),
        _ => Err(ApiError::bad_request(format!("field {name:?} has an invalid value {value:?}"))),
    }
}

/// Streams the upload into the upload directory, named by content hash.
async fn save_upload(dir: &Path, mut field: axum::extract::multipart::Field<'_>) -> ApiResult<PathBuf> {
    use std::io::Write;
    let io = |e: std::io::Error| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "IoError", e.to_string());
    std::fs::create_dir_all(dir).map_err(io)?;
    let ext = field
        .file_name()
        .and_then(|n| Path::new(n).extension())
        .and_then(|e| e.to_str())
        .filter(|e| e.chars().all(|c| c.is_ascii_alphanumeric()))
        .unwrap_or("bin")
        .to_string();
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    while let Some(chunk) = field.chunk().await.map_err(|e| ApiError::bad_request(e.to_string()))? {
        tmp.write_all(&chunk).map_err(io)?;
    }
    tmp.flush().map_err(io)?;
    let hash = file_sha256(tmp.path()).map_err(io)?;
    let path = dir.join(format!("{}.{ext}", &hash[..32]));
    tmp.persist(&path).map_err(|e| io(e.error))?;
    Ok(path)
}

async fn read_form(state: &AppState, mut multipart: Multipart) -> ApiResult<Form> {
    let mut form = Form::default();
    while let Some(field) = multipart.next_field().await.map_err(|e| ApiError::bad_request(e.to_string()))? {
        let name = field.name().unwrap_or_default().to_string();
        if name == "file" {
            form.video = Some(save_upload(&state.upload_dir, field).await?);
            continue;
        }
        if name == "face" {
            let file_name = field
                .file_name()
                .map(|n| Path::new(n).file_name().unwrap_or_default().to_string_lossy().into_owned())
                .filter(|n| !n.is_empty())
                .ok_or_else(|| ApiError::bad_request("face parts need a file name"))?;
            let bytes = field.bytes().await.map_err(|e| ApiError::bad_request(e.to_string()))?;
            if form.faces.is_none() {
                form.faces = Some(tempfile::tempdir().map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "IoError", e.to_string()))?);
            }
            let dir = form.faces.as_ref().expect("just set").path();
            std::fs::write(dir.join(file_name), bytes)
                .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "IoError", e.to_string()))?;
            continue;
        }
        let value = field.text().await.map_err(|e| ApiError::bad_request(e.to_string()))?;
        match name.as_str() {
            "title" => form.pack.title = Some(value),
            "abstract" => form.pack.abstract_text = Some(value),
            "meta" => {
                parse_meta_pair(&value)?;
                form.pack.meta.push(value);
            }
            "threshold" => form.job.threshold = Some(parse_field(&name, &value)?),
            "max_clip_len" => form.job.max_clip_len = Some(parse_field(&name, &value)?),
            "frames_per_clip" => form.job.frames_per_clip = Some(parse_field(&name, &value)?),
            "refine_passes" => form.job.refine_passes = Some(parse_field(&name, &value)?),
            "ad" => form.job.ad = parse_flag(&name, &value)?,
            "ad_wpm" => form.job.ad_wpm = Some(parse_field(&name, &value)?),
            other => return Err(ApiError::bad_request(format!("unknown field {other:?}"))),
        }
    }
    Ok(form)
}

async fn submit_job(State(state): State<Arc<AppState>>, multipart: Multipart) -> ApiResult<Response> {
    let form = read_form(&state, multipart).await?;
    let video = form.video.ok_or_else(|| ApiError::bad_request("missing \"file\" part"))?;
    let mut pack: KnowledgePack = form.pack.build()?;
    if let Some(dir) = &form.faces {
        pack.gallery = load_gallery(dir.path())?;
        pack.validate()?;
    }
    let config = form.job.to_config();
    let pipeline = state.pipeline.clone();
    let (job_id, existed) = blocking(move || {
        let existed = vidscript_core::pipeline::job_id_for(&video, &pack, &config)
            .ok()
            .and_then(|id| pipeline.store().job(&id).ok().flatten())
            .is_some();
        pipeline.submit_job(&video, pack, config).map(|id| (id, existed))
    })
    .await??;
    let job = state.pipeline.job(&job_id)?;
    if !job.stage.is_terminal() {
        state.spawn_job(job_id.clone());
    }
    let status = if existed { StatusCode::OK } else { StatusCode::ACCEPTED };
    Ok((status, Json(Submitted { job_id, stage: job.stage })).into_response())
}

async fn list_jobs(State(state): State<Arc<AppState>>) -> ApiResult<Response> {
    let jobs = state.pipeline.store().jobs().map_err(PipelineError::from)?;
    Ok(Json(jobs).into_response())
}

async fn get_job(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    Ok(Json(state.pipeline.job(&id)?).into_response())
}

async fn get_script(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    // the stored bytes, untouched
    let payload = state.pipeline.script_payload(&id)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], payload).into_response())
}

async fn get_ad(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let vtt = state.pipeline.export_ad(&id)?;
    Ok(([(header::CONTENT_TYPE, "text/vtt; charset=utf-8")], vtt).into_response())
}

async fn job_events(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let job = state.pipeline.job(&id)?;
    if let Some(sub) = state.hub.subscribe(&job_topic(&id)) {
        return Ok(ndjson(sub));
    }
    // not run by this process: a snapshot of where the job stands
    let mut lines = vec![serde_json::to_string(&PipelineEvent::StageChanged {
        job_id: id.clone(),
        stage: job.stage,
        progress: job.progress,
    })
    .expect("events serialize")];
    if let Some(error) = job.error {
        lines.push(serde_json::to_string(&PipelineEvent::JobFailed { job_id: id, error }).expect("events serialize"));
    }
    Ok(ndjson(Subscription::from_lines(lines)))
}

#[derive(Debug, Deserialize)]
struct QaRequest {
    job_ids: Vec<String>,
    question: String,
}

async fn qa(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: QaRequest = parse_json(&body)?;
    if req.job_ids.is_empty() {
        return Err(ApiError::bad_request("job_ids must not be empty"));
    }
    let pipeline = state.pipeline.clone();
    let answer = blocking(move || pipeline.qa(&req.job_ids, &req.question)).await??;
    Ok(Json(answer).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EpisodeStarted {
    pub episode_id: String,
}

async fn start_agent(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: StartEpisode = parse_json(&body)?;
    let backend = state.pipeline.backends().lmm.clone();
    let (episode, run) = state.episodes.start(req, backend)?;
    tokio::task::spawn_blocking(run);
    Ok((StatusCode::ACCEPTED, Json(EpisodeStarted { episode_id: episode.id.clone() })).into_response())
}

async fn agent_events(State(state): State<Arc<AppState>>, UrlPath(ep): UrlPath<String>) -> ApiResult<Response> {
    let sub = state
        .hub
        .subscribe(&episodes::topic(&ep))
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "UnknownEpisode", format!("unknown episode {ep}")))?;
    Ok(ndjson(sub))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ActionRequest {
    step: Option<usize>,
    approve: Option<bool>,
    #[serde(rename = "override")]
    override_with: Option<String>,
    abort: Option<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ActionAccepted {
    pub episode_id: String,
    pub step: usize,
    pub decision: String,
}

async fn agent_action(
    State(state): State<Arc<AppState>>,
    UrlPath(ep): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let req: ActionRequest = parse_json(&body)?;
    let episode = state
        .episodes
        .get(&ep)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "UnknownEpisode", format!("unknown episode {ep}")))?;
    let (steering, decision) = match (req.approve, req.override_with, req.abort) {
        (Some(true), None, None) => (Steering::Approve, "approve".to_string()),
        (None, Some(name), None) => (Steering::Override(name.clone()), format!("override:{name}")),
        (None, None, Some(true)) => (Steering::Abort, "abort".to_string()),
        _ => return Err(ApiError::bad_request("give exactly one of approve: true, override: <action>, abort: true")),
    };
    let step = episode.steer(req.step, steering)?;
    Ok(Json(ActionAccepted { episode_id: ep, step, decision }).into_response())
}
