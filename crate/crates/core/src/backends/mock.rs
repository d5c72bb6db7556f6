//! Deterministic offline backends.
//!
//! A fixture hit returns the recorded payload verbatim. On a miss the mock
//! synthesises an answer from the request itself, so a full pipeline run
//! works with no fixtures at all and is reproducible byte for byte.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use regex::Regex;
use std::sync::LazyLock;

use super::{
    AsrBackend, AsrRequest, AsrResponse, AsrSegment, BackendError, BackendKind, CallLog, FixtureFile, LmmRequest,
    LmmResponse, ModelBackend, Task,
};
use crate::prompt::{input_section, VIDEO_HEADER_PREFIX};
use crate::timecode::format_hms;

static ENTRY_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\[([0-9:.]+) - ([0-9:.]+)\]\s*(.*)$").expect("valid regex"));
static SPEECH_LINE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*speech \[([0-9:.]+) - ([0-9:.]+)\] ([^:]+): (.*)$").expect("valid regex"));

#[derive(Debug)]
pub struct MockBackend {
    id: String,
    fixtures: HashMap<String, LmmResponse>,
    log: CallLog,
}

impl MockBackend {
    pub fn new(id: impl Into<String>) -> Self {
        Self { id: id.into(), fixtures: HashMap::new(), log: CallLog::default() }
    }

    pub fn with_fixture(mut self, fingerprint: impl Into<String>, text: impl Into<String>) -> Self {
        self.fixtures.insert(fingerprint.into(), LmmResponse { text: text.into() });
        self
    }

    /// Loads every fixture of `kind` from `path`. A missing file is an empty
    /// fixture set.
    pub fn from_fixture_file(id: impl Into<String>, kind: BackendKind, path: &Path) -> Result<Self, BackendError> {
        let mut mock = Self::new(id);
        for rec in FixtureFile::open(path)?.records() {
            if rec.kind != kind {
                continue;
            }
            let resp: LmmResponse = serde_json::from_value(rec.response.clone())
                .map_err(|e| BackendError::Config(format!("fixture {}: {e}", rec.fingerprint)))?;
            mock.fixtures.insert(rec.fingerprint.clone(), resp);
        }
        Ok(mock)
    }

    pub fn call_log(&self) -> &CallLog {
        &self.log
    }

    fn synthesize(&self, req: &LmmRequest, fingerprint: &str) -> String {
        let input = input_section(&req.prompt_text);
        match req.task {
            Task::DescribeClip => {
                let id = req.tags.get("clip_id").map(String::as_str).unwrap_or("?");
                format!("clip {id}: {}", &fingerprint[..12])
            }
            Task::AttributeSpeaker => "unknown".to_string(),
            Task::Synthesize => {
                let mut out = Vec::new();
                for line in input.lines() {
                    if let Some(c) = SPEECH_LINE.captures(line) {
                        out.push(format!("[{} - {}] (dialogue, {}) {}", &c[1], &c[2], c[3].trim(), &c[4]));
                    } else if ENTRY_LINE.is_match(line) {
                        out.push(line.trim().to_string());
                    }
                }
                out.join("\n")
            }
            Task::Merge | Task::Refine => input
                .lines()
                .filter(|l| ENTRY_LINE.is_match(l))
                .map(str::trim)
                .collect::<Vec<_>>()
                .join("\n"),
            Task::Summarize => {
                let spans: Vec<(String, String)> = input
                    .lines()
                    .filter_map(|l| ENTRY_LINE.captures(l).map(|c| (c[1].to_string(), c[2].to_string())))
                    .collect();
                match (spans.first(), spans.last()) {
                    (Some(first), Some(last)) => format!(
                        "The video runs from {} to {} and is described by {} script lines.",
                        first.0,
                        last.1,
                        spans.len()
                    ),
                    _ => "The video has no script content.".to_string(),
                }
            }
            Task::AudioDescription => input
                .lines()
                .filter_map(|l| ENTRY_LINE.captures(l))
                .filter(|c| !c[3].starts_with("(dialogue"))
                .map(|c| {
                    let text = strip_kind_tag(&c[3]);
                    let words: Vec<&str> = text.split_whitespace().take(8).collect();
                    format!("[{}] {}", &c[1], words.join(" "))
                })
                .filter(|l| !l.ends_with("] "))
                .collect::<Vec<_>>()
                .join("\n"),
            Task::Answer => {
                let mut video = None;
                for line in input.lines() {
                    if let Some(rest) = line.strip_prefix(VIDEO_HEADER_PREFIX) {
                        video = rest.split_whitespace().next().map(str::to_string);
                    } else if let (Some(v), Some(c)) = (&video, ENTRY_LINE.captures(line)) {
                        return format!("The most relevant moment is [{v} @ {} - {}]: {}", &c[1], &c[2], strip_kind_tag(&c[3]));
                    }
                }
                "The scripts contain nothing relevant.".to_string()
            }
            Task::Locate => {
                let k: usize = req.tags.get("k").and_then(|k| k.parse().ok()).unwrap_or(1);
                let mut video = None;
                let mut rows = Vec::new();
                for line in input.lines() {
                    if let Some(rest) = line.strip_prefix(VIDEO_HEADER_PREFIX) {
                        video = rest.split_whitespace().next().map(str::to_string);
                    } else if let (Some(v), Some(c)) = (&video, ENTRY_LINE.captures(line)) {
                        rows.push(format!("[{v} @ {} - {}] {}", &c[1], &c[2], strip_kind_tag(&c[3])));
                        if rows.len() == k {
                            break;
                        }
                    }
                }
                rows.join("\n")
            }
            Task::AgentStep => {
                let action = req
                    .tags
                    .get("actions")
                    .and_then(|a| a.split(',').next())
                    .unwrap_or("noop")
                    .to_string();
                format!("ACTION: {action}() RATIONALE: deterministic mock policy")
            }
        }
    }
}

fn strip_kind_tag(text: &str) -> &str {
    let t = text.trim_start();
    if t.starts_with('(') {
        if let Some(end) = t.find(')') {
            return t[end + 1..].trim_start();
        }
    }
    t
}

impl ModelBackend for MockBackend {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn complete(&self, request: &LmmRequest) -> Result<LmmResponse, BackendError> {
        let started = Instant::now();
        let fp = request.fingerprint();
        let (resp, outcome) = match self.fixtures.get(&fp) {
            Some(r) => (r.clone(), "fixture"),
            None => (LmmResponse { text: self.synthesize(request, &fp) }, "synthesized"),
        };
        self.log.record(&self.id, Some(request.task), &fp, started, outcome);
        Ok(resp)
    }
}

#[derive(Debug)]
pub struct MockAsrBackend {
    id: String,
    fixtures: HashMap<String, AsrResponse>,
    log: CallLog,
}

impl MockAsrBackend {
    pub fn new(id: impl Into<String>) -> Self {
        Self { id: id.into(), fixtures: HashMap::new(), log: CallLog::default() }
    }

    pub fn with_fixture(mut self, fingerprint: impl Into<String>, response: AsrResponse) -> Self {
        self.fixtures.insert(fingerprint.into(), response);
        self
    }

    pub fn from_fixture_file(id: impl Into<String>, path: &Path) -> Result<Self, BackendError> {
        let mut mock = Self::new(id);
        for rec in FixtureFile::open(path)?.records() {
            if rec.kind != BackendKind::Asr {
                continue;
            }
            let resp: AsrResponse = serde_json::from_value(rec.response.clone())
                .map_err(|e| BackendError::Config(format!("fixture {}: {e}", rec.fingerprint)))?;
            mock.fixtures.insert(rec.fingerprint.clone(), resp);
        }
        Ok(mock)
    }

    pub fn call_log(&self) -> &CallLog {
        &self.log
    }

    /// One short utterance roughly every 12 s, placed by fingerprint bytes.
    fn synthesize(request: &AsrRequest, fingerprint: &str) -> AsrResponse {
        let bytes = hex::decode(fingerprint).unwrap_or_default();
        let mut segments = Vec::new();
        let mut k = 0usize;
        loop {
            let b = bytes.get(k % bytes.len().max(1)).copied().unwrap_or(0) as f64;
            let start = k as f64 * 12.0 + 1.0 + (b % 3.0);
            let end = start + 3.0 + (b % 2.0);
            if end > request.duration_hint_s {
                break;
            }
            segments.push(AsrSegment {
                start_s: start,
                end_s: end,
                text: format!("Line {} of the conversation at {}.", k + 1, format_hms(start)),
                confidence: 0.9,
            });
            k += 1;
        }
        AsrResponse { segments, language: request.language_hint.clone().unwrap_or_else(|| "en".into()) }
    }
}

impl AsrBackend for MockAsrBackend {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn transcribe(&self, request: &AsrRequest) -> Result<AsrResponse, BackendError> {
        let started = Instant::now();
        let fp = request.fingerprint();
        let (resp, outcome) = match self.fixtures.get(&fp) {
            Some(r) => (r.clone(), "fixture"),
            None => (Self::synthesize(request, &fp), "synthesized"),
        };
        self.log.record(&self.id, None, &fp, started, outcome);
        Ok(resp)
    }
}
