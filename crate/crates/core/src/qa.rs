//! Question answering over one or more scripts, with every timestamp
//! citation in the answer checked against the cited script.

use std::collections::{BTreeMap, HashSet};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, LmmRequest, ModelBackend, Task};
use crate::interval::overlaps;
use crate::prompt::{self, TemplateError, VIDEO_HEADER_PREFIX};
use crate::script::{Script, ScriptEntry};
use crate::timecode::{format_hms, parse_hms};

#[derive(Debug, Error)]
pub enum QaError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("the corpus has no scripts")]
    EmptyCorpus,
    #[error("unknown video id {0:?}")]
    UnknownVideoId(String),
    #[error("video id {0:?} appears twice")]
    DuplicateVideoId(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl QaError {
    pub fn code(&self) -> &'static str {
        match self {
            QaError::Backend(e) => e.code(),
            QaError::Template(_) => "UnknownTemplate",
            QaError::EmptyCorpus => "EmptyCorpus",
            QaError::UnknownVideoId(_) => "UnknownVideoId",
            QaError::DuplicateVideoId(_) => "DuplicateVideoId",
            QaError::InvalidInput(_) => "InvalidInput",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub video_id: String,
    pub label: String,
    pub script: Script,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptCorpus {
    scripts: Vec<CorpusEntry>,
}

impl ScriptCorpus {
    pub fn new(scripts: Vec<CorpusEntry>) -> Result<Self, QaError> {
        let mut seen = HashSet::new();
        for e in &scripts {
            if e.video_id.is_empty() || e.video_id.contains(|c: char| c.is_whitespace() || c == '@' || c == ']') {
                return Err(QaError::InvalidInput(format!("unusable video id {:?}", e.video_id)));
            }
            if !seen.insert(e.video_id.as_str()) {
                return Err(QaError::DuplicateVideoId(e.video_id.clone()));
            }
        }
        Ok(Self { scripts })
    }

    /// A corpus of scripts labelled by their own video ids.
    pub fn from_scripts(scripts: impl IntoIterator<Item = Script>) -> Result<Self, QaError> {
        Self::new(
            scripts
                .into_iter()
                .map(|s| CorpusEntry { video_id: s.video_id.clone(), label: s.video_id.clone(), script: s })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[CorpusEntry] {
        &self.scripts
    }

    pub fn len(&self) -> usize {
        self.scripts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scripts.is_empty()
    }

    pub fn get(&self, video_id: &str) -> Option<&CorpusEntry> {
        self.scripts.iter().find(|e| e.video_id == video_id)
    }

    /// The prompt input: every script under its video header.
    pub fn render(&self) -> String {
        let mut out = Vec::new();
        for e in &self.scripts {
            out.push(format!(
                "{VIDEO_HEADER_PREFIX}{} | {} | duration {} ===",
                e.video_id,
                e.label,
                format_hms(e.script.duration_s)
            ));
            if let Some(s) = &e.script.summary {
                out.push(format!("Summary: {s}"));
            }
            out.extend(e.script.entries.iter().map(ScriptEntry::to_line));
        }
        out.join("\n")
    }
}

/// Entries of the cited script whose interval overlaps the citation, in
/// script order. Empty when the citation points at nothing.
pub fn resolve_citation(
    corpus: &ScriptCorpus,
    video_id: &str,
    start_s: f64,
    end_s: f64,
) -> Result<Vec<ScriptEntry>, QaError> {
    let entry = corpus.get(video_id).ok_or_else(|| QaError::UnknownVideoId(video_id.to_string()))?;
    if end_s < start_s || start_s > entry.script.duration_s {
        return Ok(Vec::new());
    }
    Ok(entry.script.entries.iter().filter(|e| overlaps(e.interval(), (start_s, end_s))).cloned().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Citation {
    pub video_id: String,
    pub start_s: f64,
    pub end_s: f64,
    /// Whether the citation overlaps at least one entry of its script.
    pub resolved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedAnswer {
    pub text: String,
    pub citations: Vec<Citation>,
    /// True iff there is at least one citation and every citation resolves.
    pub verified: bool,
    /// Citations naming videos outside the corpus; removed from `citations`.
    #[serde(default)]
    pub discarded_citations: usize,
}

static CITATION_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"\[\s*(?:([^\]\[@\s]+)\s*@\s*)?([0-9]{1,2}:[0-9:.]+)\s*(?:[-\u{2013}]\s*([0-9]{1,2}:[0-9:.]+)\s*)?\]")
        .expect("valid regex")
});

/// A citation found in model text. `video_id` is `None` when the model left
/// it out.
#[derive(Debug, Clone, PartialEq)]
struct RawCitation {
    video_id: Option<String>,
    start_s: f64,
    end_s: f64,
    rest_of_line: String,
}

fn scan_citations(text: &str) -> Vec<RawCitation> {
    let mut out = Vec::new();
    for line in text.lines() {
        for c in CITATION_RE.captures_iter(line) {
            let Some(start) = parse_hms(&c[2]) else { continue };
            let end = match c.get(3) {
                Some(m) => match parse_hms(m.as_str()) {
                    Some(e) => e,
                    None => continue,
                },
                None => start,
            };
            let whole = c.get(0).expect("match");
            out.push(RawCitation {
                video_id: c.get(1).map(|m| m.as_str().to_string()),
                start_s: start,
                end_s: end,
                rest_of_line: line[whole.end()..].trim().trim_start_matches([':', '-']).trim().to_string(),
            });
        }
    }
    out
}

/// The corpus video a citation refers to, if any. A citation without an id
/// is taken to mean the only video of a single-video corpus.
fn owning_video<'a>(corpus: &'a ScriptCorpus, raw: &RawCitation) -> Option<&'a str> {
    match &raw.video_id {
        Some(id) => corpus.get(id).map(|e| e.video_id.as_str()),
        None if corpus.len() == 1 => Some(corpus.scripts[0].video_id.as_str()),
        None => None,
    }
}

/// Checks the citations in `text` against the corpus.
pub fn ground_answer(corpus: &ScriptCorpus, text: &str) -> GroundedAnswer {
    let mut citations = Vec::new();
    let mut discarded = 0;
    for raw in scan_citations(text) {
        let Some(video_id) = owning_video(corpus, &raw) else {
            discarded += 1;
            continue;
        };
        let resolved = !resolve_citation(corpus, video_id, raw.start_s, raw.end_s).unwrap_or_default().is_empty();
        citations.push(Citation { video_id: video_id.to_string(), start_s: raw.start_s, end_s: raw.end_s, resolved });
    }
    let verified = discarded == 0 && !citations.is_empty() && citations.iter().all(|c| c.resolved);
    GroundedAnswer { text: text.to_string(), citations, verified, discarded_citations: discarded }
}

pub fn answer(corpus: &ScriptCorpus, question: &str, backend: &dyn ModelBackend) -> Result<GroundedAnswer, QaError> {
    if corpus.is_empty() {
        return Err(QaError::EmptyCorpus);
    }
    if question.trim().is_empty() {
        return Err(QaError::InvalidInput("empty question".into()));
    }
    let vars: BTreeMap<&str, String> = [("input", corpus.render()), ("question", question.trim().to_string())].into();
    let req = LmmRequest::text(Task::Answer, prompt::render(prompt::QA_ANSWER, &vars)?);
    let resp = backend.complete(&req)?;
    Ok(ground_answer(corpus, resp.text.trim()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moment {
    pub video_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub snippet: String,
}

/// Up to `k` moments matching `query`, in the order the backend ranked
/// them. Rows that do not resolve against the corpus are dropped.
pub fn locate(corpus: &ScriptCorpus, query: &str, backend: &dyn ModelBackend, k: usize) -> Result<Vec<Moment>, QaError> {
    if corpus.is_empty() {
        return Err(QaError::EmptyCorpus);
    }
    if k == 0 {
        return Err(QaError::InvalidInput("k must be at least 1".into()));
    }
    if query.trim().is_empty() {
        return Err(QaError::InvalidInput("empty query".into()));
    }
    let vars: BTreeMap<&str, String> =
        [("input", corpus.render()), ("query", query.trim().to_string()), ("k", k.to_string())].into();
    let req = LmmRequest::text(Task::Locate, prompt::render(prompt::QA_LOCATE, &vars)?).with_tag("k", k.to_string());
    let resp = backend.complete(&req)?;
    let mut out = Vec::new();
    for line in resp.text.lines() {
        // one moment per line: only the first citation on a line counts
        let Some(raw) = scan_citations(line).into_iter().next() else { continue };
        let Some(video_id) = owning_video(corpus, &raw) else { continue };
        if resolve_citation(corpus, video_id, raw.start_s, raw.end_s)?.is_empty() {
            continue;
        }
        out.push(Moment { video_id: video_id.to_string(), start_s: raw.start_s, end_s: raw.end_s, snippet: raw.rest_of_line });
        if out.len() == k {
            break;
        }
    }
    Ok(out)
}

/// One persisted question/answer exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaExchange {
    pub question: String,
    pub answer_text: String,
    pub citations: Vec<Citation>,
    pub verified: bool,
    pub backend_id: String,
    pub timestamp: String,
}

impl QaExchange {
    pub fn new(question: &str, answer: &GroundedAnswer, backend_id: &str) -> Self {
        Self {
            question: question.to_string(),
            answer_text: answer.text.clone(),
            citations: answer.citations.clone(),
            verified: answer.verified,
            backend_id: backend_id.to_string(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        }
    }
}
