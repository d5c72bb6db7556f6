//! Clients for the three external model services (multimodal, text-only and
//! speech recognition) and their deterministic stand-ins.
//!
//! Every request has a content fingerprint: SHA-256 over a canonical JSON
//! rendering in which images are replaced by the hash of their raw pixels
//! and prompt text is NFC-normalised. Fingerprints key the fixture files
//! and the pipeline's per-clip description cache.

mod fixture;
mod http;
mod mock;
mod rate;
mod scripted;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

pub use fixture::{FixtureFile, FixtureRecord, RecordingAsrBackend, RecordingBackend};
pub use http::{HttpAsrBackend, HttpModelBackend};
pub use mock::{MockAsrBackend, MockBackend};
pub use rate::{RetryPolicy, TokenBucket};
pub use scripted::ScriptedBackend;

pub const LMM_ENDPOINT_ENV: &str = "VIDSCRIPT_LMM_ENDPOINT";
pub const LMM_KEY_ENV: &str = "VIDSCRIPT_LMM_KEY";
pub const LLM_ENDPOINT_ENV: &str = "VIDSCRIPT_LLM_ENDPOINT";
pub const LLM_KEY_ENV: &str = "VIDSCRIPT_LLM_KEY";
pub const ASR_ENDPOINT_ENV: &str = "VIDSCRIPT_ASR_ENDPOINT";
pub const ASR_KEY_ENV: &str = "VIDSCRIPT_ASR_KEY";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("backend error: {0}")]
    Failed(String),
    #[error("backend returned an empty response")]
    EmptyResponse,
    #[error("rate limit wait exceeded {waited_ms} ms")]
    RateLimitExceeded { waited_ms: u64 },
    #[error("no credential configured in ${0}")]
    AuthMissing(String),
    #[error("fixture conflict for fingerprint {0}")]
    FixtureConflict(String),
    #[error("could not write fixture: {0}")]
    FixtureWriteFailed(String),
    #[error("invalid backend configuration: {0}")]
    Config(String),
}

impl BackendError {
    pub fn code(&self) -> &'static str {
        match self {
            BackendError::Unavailable(_) => "BackendUnavailable",
            BackendError::Status { .. } | BackendError::Failed(_) => "BackendError",
            BackendError::EmptyResponse => "EmptyResponse",
            BackendError::RateLimitExceeded { .. } => "RateLimitExceeded",
            BackendError::AuthMissing(_) => "AuthMissing",
            BackendError::FixtureConflict(_) => "FixtureConflict",
            BackendError::FixtureWriteFailed(_) => "FixtureWriteFailed",
            BackendError::Config(_) => "InvalidConfig",
        }
    }

    /// Transport failures, throttling and server-side errors are worth
    /// another attempt; client errors and configuration problems are not.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Unavailable(_) | BackendError::EmptyResponse | BackendError::Failed(_) => true,
            BackendError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Lmm,
    Llm,
    Asr,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Lmm => "lmm",
            BackendKind::Llm => "llm",
            BackendKind::Asr => "asr",
        })
    }
}

/// What a model request is for. Carried in the request so mocks can
/// synthesise a plausible answer and so call logs are readable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    DescribeClip,
    AttributeSpeaker,
    Synthesize,
    Merge,
    Summarize,
    Refine,
    AudioDescription,
    Answer,
    Locate,
    AgentStep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmmRequest {
    pub task: Task,
    pub images: Vec<RgbImage>,
    pub prompt_text: String,
    pub max_response_tokens: u32,
    pub temperature: f32,
    /// Free-form labels (clip id, video id...) that take part in the
    /// fingerprint but are not sent over the wire.
    pub tags: BTreeMap<String, String>,
}

impl LmmRequest {
    pub fn text(task: Task, prompt_text: impl Into<String>) -> Self {
        Self {
            task,
            images: Vec::new(),
            prompt_text: prompt_text.into(),
            max_response_tokens: 2048,
            temperature: 0.0,
            tags: BTreeMap::new(),
        }
    }

    pub fn with_tag(mut self, key: &str, value: impl Into<String>) -> Self {
        self.tags.insert(key.to_string(), value.into());
        self
    }

    pub fn fingerprint(&self) -> String {
        let images: Vec<String> = self.images.iter().map(image_digest).collect();
        let canonical = serde_json::json!({
            "images": images,
            "max_response_tokens": self.max_response_tokens,
            "prompt_text": self.prompt_text.nfc().collect::<String>(),
            "tags": self.tags,
            "task": self.task,
            "temperature": format!("{:.3}", self.temperature),
        });
        sha256_hex(canonical.to_string().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmmResponse {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrRequest {
    pub path: PathBuf,
    /// SHA-256 of the media file; keeps fingerprints independent of where
    /// the file lives.
    pub content_hash: String,
    pub language_hint: Option<String>,
    pub duration_hint_s: f64,
}

impl AsrRequest {
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::json!({
            "content_hash": self.content_hash,
            "duration_hint_s": format!("{:.3}", self.duration_hint_s),
            "kind": "asr",
            "language_hint": self.language_hint,
        });
        sha256_hex(canonical.to_string().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrSegment {
    pub start_s: f64,
    pub end_s: f64,
    pub text: String,
    #[serde(default = "one")]
    pub confidence: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrResponse {
    pub segments: Vec<AsrSegment>,
    pub language: String,
}

/// A multimodal or text-only model. Text-only backends simply receive
/// requests without images.
pub trait ModelBackend: Send + Sync {
    fn id(&self) -> String;
    fn complete(&self, request: &LmmRequest) -> Result<LmmResponse, BackendError>;
}

pub trait AsrBackend: Send + Sync {
    fn id(&self) -> String;
    fn transcribe(&self, request: &AsrRequest) -> Result<AsrResponse, BackendError>;
}

impl<T: ModelBackend + ?Sized> ModelBackend for Arc<T> {
    fn id(&self) -> String {
        (**self).id()
    }
    fn complete(&self, request: &LmmRequest) -> Result<LmmResponse, BackendError> {
        (**self).complete(request)
    }
}

impl<T: AsrBackend + ?Sized> AsrBackend for Arc<T> {
    fn id(&self) -> String {
        (**self).id()
    }
    fn transcribe(&self, request: &AsrRequest) -> Result<AsrResponse, BackendError> {
        (**self).transcribe(request)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of an image's dimensions and raw RGB bytes.
pub fn image_digest(image: &RgbImage) -> String {
    let mut h = Sha256::new();
    h.update(image.width().to_le_bytes());
    h.update(image.height().to_le_bytes());
    h.update(image.as_raw());
    hex::encode(h.finalize())
}

pub fn encode_png(image: &RgbImage) -> Vec<u8> {
    let mut out = std::io::Cursor::new(Vec::new());
    image
        .write_to(&mut out, image::ImageFormat::Png)
        .expect("PNG encoding into memory cannot fail");
    out.into_inner()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub backend: String,
    pub task: Option<Task>,
    pub fingerprint: String,
    pub latency_ms: f64,
    pub outcome: String,
}

/// Shared, append-only log of backend calls.
#[derive(Debug, Clone, Default)]
pub struct CallLog {
    inner: Arc<Mutex<Vec<CallRecord>>>,
}

impl CallLog {
    pub fn record(&self, backend: &str, task: Option<Task>, fingerprint: &str, started: Instant, outcome: &str) {
        let rec = CallRecord {
            backend: backend.to_string(),
            task,
            fingerprint: fingerprint.to_string(),
            latency_ms: started.elapsed().as_secs_f64() * 1000.0,
            outcome: outcome.to_string(),
        };
        tracing::debug!(backend, fingerprint, latency_ms = rec.latency_ms, outcome, "backend call");
        self.inner.lock().expect("call log poisoned").push(rec);
    }

    pub fn records(&self) -> Vec<CallRecord> {
        self.inner.lock().expect("call log poisoned").clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("call log poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendMode {
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub mode: BackendMode,
    pub endpoint: Option<String>,
    pub credential_env: String,
    pub max_retries: u32,
    pub base_backoff_s: f64,
    pub rate_limit_rps: f64,
    pub fixture_path: Option<PathBuf>,
    /// How long a caller may wait on the rate limiter before
    /// `RateLimitExceeded` is surfaced.
    pub rate_limit_deadline_s: f64,
    pub timeout_s: f64,
}

impl BackendConfig {
    pub fn mock(kind: BackendKind, fixture_path: impl Into<PathBuf>) -> Self {
        Self {
            kind,
            mode: BackendMode::Mock,
            endpoint: None,
            credential_env: Self::default_key_env(kind).to_string(),
            max_retries: 2,
            base_backoff_s: 1.0,
            rate_limit_rps: 5.0,
            fixture_path: Some(fixture_path.into()),
            rate_limit_deadline_s: 60.0,
            timeout_s: 120.0,
        }
    }

    pub fn http(kind: BackendKind, endpoint: impl Into<String>) -> Self {
        Self {
            mode: BackendMode::Http,
            endpoint: Some(endpoint.into()),
            fixture_path: None,
            ..Self::mock(kind, "")
        }
    }

    /// HTTP config whose endpoint comes from the kind's environment variable.
    pub fn http_from_env(kind: BackendKind) -> Result<Self, BackendError> {
        let var = match kind {
            BackendKind::Lmm => LMM_ENDPOINT_ENV,
            BackendKind::Llm => LLM_ENDPOINT_ENV,
            BackendKind::Asr => ASR_ENDPOINT_ENV,
        };
        let endpoint = std::env::var(var)
            .ok()
            .or_else(|| (kind == BackendKind::Llm).then(|| std::env::var(LMM_ENDPOINT_ENV).ok()).flatten())
            .ok_or_else(|| BackendError::Config(format!("${var} is not set")))?;
        Ok(Self::http(kind, endpoint))
    }

    pub fn default_key_env(kind: BackendKind) -> &'static str {
        match kind {
            BackendKind::Lmm => LMM_KEY_ENV,
            BackendKind::Llm => LLM_KEY_ENV,
            BackendKind::Asr => ASR_KEY_ENV,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        match self.mode {
            BackendMode::Http if self.endpoint.as_deref().is_none_or(str::is_empty) => {
                Err(BackendError::Config("http mode requires an endpoint".into()))
            }
            BackendMode::Mock if self.fixture_path.as_deref().is_none_or(|p| p.as_os_str().is_empty()) => {
                Err(BackendError::Config("mock mode requires a fixture path".into()))
            }
            _ if !(self.rate_limit_rps > 0.0) => Err(BackendError::Config("rate_limit_rps must be positive".into())),
            _ => Ok(()),
        }
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.max_retries + 1,
            base_backoff: Duration::from_secs_f64(self.base_backoff_s.max(0.0)),
            jitter: true,
        }
    }
}

pub fn build_model_backend(config: &BackendConfig) -> Result<Arc<dyn ModelBackend>, BackendError> {
    config.validate()?;
    if config.kind == BackendKind::Asr {
        return Err(BackendError::Config("ASR config used for a model backend".into()));
    }
    Ok(match config.mode {
        BackendMode::Mock => Arc::new(MockBackend::from_fixture_file(
            format!("mock-{}", config.kind),
            config.kind,
            config.fixture_path.as_deref().expect("validated"),
        )?),
        BackendMode::Http => Arc::new(HttpModelBackend::new(config.clone())?),
    })
}

pub fn build_asr_backend(config: &BackendConfig) -> Result<Arc<dyn AsrBackend>, BackendError> {
    config.validate()?;
    if config.kind != BackendKind::Asr {
        return Err(BackendError::Config("model config used for an ASR backend".into()));
    }
    Ok(match config.mode {
        BackendMode::Mock => Arc::new(MockAsrBackend::from_fixture_file(
            "mock-asr",
            config.fixture_path.as_deref().expect("validated"),
        )?),
        BackendMode::Http => Arc::new(HttpAsrBackend::new(config.clone())?),
    })
}
