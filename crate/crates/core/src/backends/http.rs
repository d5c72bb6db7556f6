//! JSON-over-HTTP clients.
//!
//! Model backends POST `{images: [base64 PNG], prompt_text,
//! max_response_tokens, temperature}` and expect `{text}` or `{error}`.
//! ASR backends POST `{path, language}` and expect
//! `{segments: [{start_s, end_s, text, confidence}], language}`.

use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::Deserialize;
use serde_json::json;
use ureq::Agent;

use super::{
    encode_png, AsrBackend, AsrRequest, AsrResponse, BackendConfig, BackendError, CallLog, LmmRequest, LmmResponse,
    ModelBackend, TokenBucket,
};

struct Transport {
    config: BackendConfig,
    agent: Agent,
    bucket: TokenBucket,
    log: CallLog,
}

impl Transport {
    fn new(config: BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let agent: Agent = Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_s.max(0.001))))
            .build()
            .into();
        let bucket = TokenBucket::per_second(config.rate_limit_rps);
        Ok(Self { config, agent, bucket, log: CallLog::default() })
    }

    fn credential(&self) -> Result<String, BackendError> {
        match std::env::var(&self.config.credential_env) {
            Ok(k) if !k.is_empty() => Ok(k),
            _ => Err(BackendError::AuthMissing(self.config.credential_env.clone())),
        }
    }

    fn post_once(&self, key: &str, body: &serde_json::Value) -> Result<String, BackendError> {
        self.bucket
            .acquire(Duration::from_secs_f64(self.config.rate_limit_deadline_s.max(0.0)))?;
        let endpoint = self.config.endpoint.as_deref().expect("validated");
        let mut resp = self
            .agent
            .post(endpoint)
            .header("Authorization", &format!("Bearer {key}"))
            .send_json(body)
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Unavailable(format!("reading body: {e}")))?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Status { status, body: text });
        }
        Ok(text)
    }

    /// Rate-limited, retried POST. Every attempt is logged.
    fn post(&self, fingerprint: &str, task: Option<super::Task>, body: &serde_json::Value) -> Result<String, BackendError> {
        let key = self.credential()?;
        let id = self.id();
        let (text, _) = self.config.retry_policy().run(|_| {
            let started = Instant::now();
            let result = self.post_once(&key, body);
            let outcome = match &result {
                Ok(_) => "ok".to_string(),
                Err(e) => e.code().to_string(),
            };
            self.log.record(&id, task, fingerprint, started, &outcome);
            result
        })?;
        Ok(text)
    }

    fn id(&self) -> String {
        format!("http-{}:{}", self.config.kind, self.config.endpoint.as_deref().unwrap_or(""))
    }
}

#[derive(Deserialize)]
struct ModelReply {
    text: Option<String>,
    error: Option<serde_json::Value>,
}

pub struct HttpModelBackend {
    transport: Transport,
}

impl HttpModelBackend {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        Ok(Self { transport: Transport::new(config)? })
    }

    pub fn call_log(&self) -> &CallLog {
        &self.transport.log
    }

    pub fn wire_body(request: &LmmRequest) -> serde_json::Value {
        let images: Vec<String> = request.images.iter().map(|img| BASE64.encode(encode_png(img))).collect();
        json!({
            "images": images,
            "prompt_text": request.prompt_text,
            "max_response_tokens": request.max_response_tokens,
            "temperature": request.temperature,
        })
    }
}

impl ModelBackend for HttpModelBackend {
    fn id(&self) -> String {
        self.transport.id()
    }

    fn complete(&self, request: &LmmRequest) -> Result<LmmResponse, BackendError> {
        let fp = request.fingerprint();
        let raw = self.transport.post(&fp, Some(request.task), &Self::wire_body(request))?;
        let reply: ModelReply =
            serde_json::from_str(&raw).map_err(|e| BackendError::Failed(format!("malformed reply: {e}: {raw}")))?;
        if let Some(err) = reply.error {
            return Err(BackendError::Failed(err.to_string()));
        }
        match reply.text {
            Some(t) if !t.trim().is_empty() => Ok(LmmResponse { text: t }),
            _ => Err(BackendError::EmptyResponse),
        }
    }
}

pub struct HttpAsrBackend {
    transport: Transport,
}

impl HttpAsrBackend {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        Ok(Self { transport: Transport::new(config)? })
    }

    pub fn call_log(&self) -> &CallLog {
        &self.transport.log
    }
}

impl AsrBackend for HttpAsrBackend {
    fn id(&self) -> String {
        self.transport.id()
    }

    fn transcribe(&self, request: &AsrRequest) -> Result<AsrResponse, BackendError> {
        let body = json!({
            "path": request.path,
            "language": request.language_hint,
        });
        let raw = self.transport.post(&request.fingerprint(), None, &body)?;
        serde_json::from_str(&raw).map_err(|e| BackendError::Failed(format!("malformed ASR reply: {e}")))
    }
}
