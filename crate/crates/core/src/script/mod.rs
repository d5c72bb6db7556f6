//! The timestamped script: synthesis from clip descriptions and the
//! transcript, summarisation, the summary-guided refinement pass, and the
//! audio-description track built on top of it.
//!
//! Entries travel through prompts and model output as lines of the form
//!
//! ```text
//! [HH:MM:SS - HH:MM:SS] (kind) text
//! [HH:MM:SS - HH:MM:SS] (dialogue, Speaker Name) text
//! ```
//!
//! where the `(kind)` tag is optional and defaults to narration.

mod ad;

use std::collections::BTreeMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::backends::{BackendError, LmmRequest, ModelBackend, Task};
use crate::describe::ClipDescription;
use crate::interval::union_len;
use crate::knowledge::KnowledgePack;
use crate::prompt::{self, TemplateError};
use crate::scene::{Clip, ClipSource};
use crate::timecode::{format_hms, parse_hms};
use crate::transcript::{align_to_clips, Transcript};
use crate::workpool::map_ordered;

pub use ad::{export_webvtt, generate_ad, schedule_ad, AdCue, AdReport, DEFAULT_AD_WPM, PLACEMENT_WINDOW_S};

pub const DEFAULT_CHUNK_BUDGET_TOKENS: usize = 24_000;
/// Refinement may not shrink the covered time by more than this fraction.
pub const MAX_COVERAGE_LOSS: f64 = 0.10;

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("unparseable model output ({valid} of {lines} lines usable)")]
    UnparseableOutput { valid: usize, lines: usize, raw: String },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl ScriptError {
    pub fn code(&self) -> &'static str {
        match self {
            ScriptError::Backend(e) => e.code(),
            ScriptError::Template(_) => "UnknownTemplate",
            ScriptError::UnparseableOutput { .. } => "UnparseableOutput",
            ScriptError::InvalidInput(_) => "InvalidInput",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Narration,
    Dialogue,
    Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub start_s: f64,
    pub end_s: f64,
    pub text: String,
    pub kind: EntryKind,
    pub speaker: Option<String>,
}

impl ScriptEntry {
    pub fn interval(&self) -> (f64, f64) {
        (self.start_s, self.end_s)
    }

    pub fn to_line(&self) -> String {
        let tag = match (self.kind, &self.speaker) {
            (EntryKind::Dialogue, Some(s)) => format!("(dialogue, {s})"),
            (EntryKind::Dialogue, None) => "(dialogue)".to_string(),
            (EntryKind::Event, _) => "(event)".to_string(),
            (EntryKind::Narration, _) => "(narration)".to_string(),
        };
        format!("[{} - {}] {tag} {}", format_hms(self.start_s), format_hms(self.end_s), self.text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Script {
    pub video_id: String,
    pub duration_s: f64,
    pub entries: Vec<ScriptEntry>,
    pub summary: Option<String>,
    pub revision: u32,
}

impl Script {
    pub fn render_entries(&self) -> String {
        self.entries.iter().map(ScriptEntry::to_line).collect::<Vec<_>>().join("\n")
    }

    pub fn coverage_s(&self) -> f64 {
        union_len(self.entries.iter().map(ScriptEntry::interval))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

static ENTRY_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\s*(?:[-*]\s+)?\[\s*([0-9:.]+)\s*[-\u{2013}]\s*([0-9:.]+)\s*\]\s*(?:\(([^)]*)\))?\s*(.*)$")
        .expect("valid regex")
});

/// Parses one entry line. `None` for anything that is not a well-formed
/// entry with a non-empty text and `end >= start`.
pub fn parse_entry_line(line: &str) -> Option<ScriptEntry> {
    let caps = ENTRY_RE.captures(line)?;
    let start = parse_hms(&caps[1])?;
    let end = parse_hms(&caps[2])?;
    if end < start {
        return None;
    }
    let text = caps[4].trim().to_string();
    if text.is_empty() {
        return None;
    }
    let (kind, speaker) = match caps.get(3).map(|m| m.as_str().trim()) {
        None => (EntryKind::Narration, None),
        Some(tag) => {
            let mut parts = tag.splitn(2, ',');
            let kind = match parts.next().unwrap_or("").trim().to_ascii_lowercase().as_str() {
                "dialogue" => EntryKind::Dialogue,
                "event" => EntryKind::Event,
                "narration" => EntryKind::Narration,
                _ => return None,
            };
            let speaker = parts.next().map(|s| s.trim().to_string()).filter(|s| !s.is_empty());
            (kind, speaker)
        }
    };
    Some(ScriptEntry { start_s: start, end_s: end, text, kind, speaker })
}

/// Parses model output into entries clamped to `[0, duration_s]`, sorted.
/// Fails when fewer than half of the non-blank lines are usable.
pub fn parse_script_output(raw: &str, duration_s: f64) -> Result<Vec<ScriptEntry>, ScriptError> {
    let lines: Vec<&str> = raw.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut entries: Vec<ScriptEntry> = lines.iter().filter_map(|l| parse_entry_line(l)).collect();
    if lines.is_empty() || entries.len() * 2 < lines.len() {
        return Err(ScriptError::UnparseableOutput { valid: entries.len(), lines: lines.len(), raw: raw.to_string() });
    }
    for e in &mut entries {
        if e.end_s > duration_s || e.start_s > duration_s {
            warn!(start = e.start_s, end = e.end_s, duration_s, "clamping script entry to video duration");
        }
        e.start_s = e.start_s.clamp(0.0, duration_s);
        e.end_s = e.end_s.clamp(e.start_s, duration_s);
    }
    sort_entries(&mut entries);
    Ok(entries)
}

fn sort_entries(entries: &mut [ScriptEntry]) {
    entries.sort_by(|a, b| a.start_s.total_cmp(&b.start_s).then(a.end_s.total_cmp(&b.end_s)));
}

/// Rough token count used for chunking: four characters per token.
pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

#[derive(Debug, Clone)]
pub struct SynthesisOptions {
    pub video_id: String,
    pub chunk_budget_tokens: usize,
    pub parallelism: usize,
}

impl SynthesisOptions {
    pub fn new(video_id: impl Into<String>) -> Self {
        Self { video_id: video_id.into(), chunk_budget_tokens: DEFAULT_CHUNK_BUDGET_TOKENS, parallelism: 2 }
    }
}

/// The per-clip blocks fed to the synthesis prompt: the description line
/// followed by indented speech lines.
pub fn synthesis_blocks(descriptions: &[ClipDescription], transcript: &Transcript) -> Vec<String> {
    let clips: Vec<Clip> = descriptions
        .iter()
        .map(|d| Clip { clip_id: d.clip_id, start_s: d.start_s, end_s: d.end_s, source: ClipSource::SceneCut })
        .collect();
    let aligned = align_to_clips(transcript, &clips);
    descriptions
        .iter()
        .map(|d| {
            let mut block = format!("[{} - {}] {}", format_hms(d.start_s), format_hms(d.end_s), d.text.trim());
            for s in aligned.get(&d.clip_id).into_iter().flatten() {
                let who = s.speaker.as_deref().unwrap_or("Unknown speaker");
                block.push_str(&format!(
                    "\n  speech [{} - {}] {who}: {}",
                    format_hms(s.start_s),
                    format_hms(s.end_s),
                    s.text.trim()
                ));
            }
            block
        })
        .collect()
}

/// Greedy packing of blocks into chunks of at most `budget` estimated
/// tokens. A block larger than the budget gets a chunk of its own.
pub fn pack_chunks(blocks: &[String], budget: usize) -> Vec<Vec<&str>> {
    let mut chunks: Vec<Vec<&str>> = Vec::new();
    let mut used = 0usize;
    for b in blocks {
        // +1 for the joining newline
        let cost = estimate_tokens(b) + 1;
        match chunks.last_mut() {
            Some(cur) if used + cost <= budget => {
                cur.push(b);
                used += cost;
            }
            _ => {
                chunks.push(vec![b]);
                used = cost;
            }
        }
    }
    chunks
}

fn context_var(pack: &KnowledgePack) -> String {
    let c = pack.context_block();
    if c.is_empty() {
        String::new()
    } else {
        format!("{c}\n")
    }
}

fn call_text(backend: &dyn ModelBackend, req: &LmmRequest) -> Result<String, ScriptError> {
    let resp = backend.complete(req)?;
    if resp.text.trim().is_empty() {
        return Err(BackendError::EmptyResponse.into());
    }
    Ok(resp.text)
}

/// Builds the script. Inputs are split into chunks under the token budget;
/// each chunk is written independently, and when there is more than one
/// chunk a single merge call joins them.
pub fn synthesize(
    descriptions: &[ClipDescription],
    transcript: &Transcript,
    pack: &KnowledgePack,
    backend: &dyn ModelBackend,
    options: &SynthesisOptions,
) -> Result<Script, ScriptError> {
    if descriptions.is_empty() {
        return Err(ScriptError::InvalidInput("no clip descriptions".into()));
    }
    if descriptions.windows(2).any(|w| w[1].start_s < w[0].start_s) {
        return Err(ScriptError::InvalidInput("descriptions not in time order".into()));
    }
    let duration_s = descriptions.iter().map(|d| d.end_s).fold(0.0, f64::max);
    let blocks = synthesis_blocks(descriptions, transcript);
    let chunks = pack_chunks(&blocks, options.chunk_budget_tokens.max(1));
    let context = context_var(pack);
    let count = chunks.len();

    let mut requests = Vec::with_capacity(count);
    for (i, chunk) in chunks.iter().enumerate() {
        let vars: BTreeMap<&str, String> = [
            ("context", context.clone()),
            ("chunk_index", (i + 1).to_string()),
            ("chunk_count", count.to_string()),
            ("input", chunk.join("\n")),
        ]
        .into();
        let req = LmmRequest::text(Task::Synthesize, prompt::render(prompt::SCRIPT_SYNTHESIZE, &vars)?)
            .with_tag("video_id", options.video_id.clone())
            .with_tag("chunk", format!("{}/{count}", i + 1));
        requests.push(req);
    }
    let outputs = map_ordered(&requests, options.parallelism, |_, req| call_text(backend, req));
    let mut entries = Vec::new();
    for out in outputs {
        entries.extend(parse_script_output(&out?, duration_s)?);
    }

    if count > 1 {
        sort_entries(&mut entries);
        let input = entries.iter().map(ScriptEntry::to_line).collect::<Vec<_>>().join("\n");
        let vars: BTreeMap<&str, String> =
            [("context", context), ("chunk_count", count.to_string()), ("input", input)].into();
        let req = LmmRequest::text(Task::Merge, prompt::render(prompt::SCRIPT_MERGE, &vars)?)
            .with_tag("video_id", options.video_id.clone());
        entries = parse_script_output(&call_text(backend, &req)?, duration_s)?;
    }
    sort_entries(&mut entries);
    Ok(Script { video_id: options.video_id.clone(), duration_s, entries, summary: None, revision: 0 })
}

/// One outline line per budget-sized group of entries.
pub fn outline(script: &Script, budget: usize) -> String {
    let lines: Vec<String> = script.entries.iter().map(ScriptEntry::to_line).collect();
    let mut out = Vec::new();
    let mut start = 0;
    while start < lines.len() {
        let mut used = 0;
        let mut end = start;
        while end < lines.len() && (end == start || used + estimate_tokens(&lines[end]) < budget) {
            used += estimate_tokens(&lines[end]) + 1;
            end += 1;
        }
        let first = &script.entries[start];
        let last = &script.entries[end - 1];
        let gist: String = first.text.chars().take(120).collect();
        out.push(format!(
            "[{} - {}] {gist} ({} entries)",
            format_hms(first.start_s),
            format_hms(last.end_s),
            end - start
        ));
        start = end;
    }
    out.join("\n")
}

/// Asks for a summary and returns the script with it attached. Scripts that
/// fit the budget are sent whole; longer ones as an outline.
pub fn summarize(
    script: &Script,
    pack: &KnowledgePack,
    backend: &dyn ModelBackend,
    budget_tokens: usize,
) -> Result<Script, ScriptError> {
    if script.is_empty() {
        return Err(ScriptError::InvalidInput("cannot summarize an empty script".into()));
    }
    let full = script.render_entries();
    let (mode, input) = if estimate_tokens(&full) <= budget_tokens {
        ("full script", full)
    } else {
        ("chunked outline", outline(script, budget_tokens))
    };
    let vars: BTreeMap<&str, String> =
        [("mode", mode.to_string()), ("context", context_var(pack)), ("input", input)].into();
    let req = LmmRequest::text(Task::Summarize, prompt::render(prompt::SCRIPT_SUMMARIZE, &vars)?)
        .with_tag("video_id", script.video_id.clone());
    let summary = call_text(backend, &req)?.trim().to_string();
    Ok(Script { summary: Some(summary), ..script.clone() })
}

#[derive(Debug, Clone, PartialEq)]
pub enum RefineOutcome {
    Revised(Script),
    /// The revision lost too much coverage; the original is kept.
    Rejected { original: Script, coverage_before: f64, coverage_after: f64 },
}

impl RefineOutcome {
    pub fn into_script(self) -> Script {
        match self {
            RefineOutcome::Revised(s) => s,
            RefineOutcome::Rejected { original, .. } => original,
        }
    }

    pub fn is_rejected(&self) -> bool {
        matches!(self, RefineOutcome::Rejected { .. })
    }
}

/// Text-only self-correction pass guided by the summary.
pub fn refine(script: &Script, backend: &dyn ModelBackend) -> Result<RefineOutcome, ScriptError> {
    let summary = script
        .summary
        .as_deref()
        .ok_or_else(|| ScriptError::InvalidInput("refine needs a summary".into()))?;
    if script.is_empty() {
        return Err(ScriptError::InvalidInput("cannot refine an empty script".into()));
    }
    let vars: BTreeMap<&str, String> =
        [("summary", summary.to_string()), ("input", script.render_entries())].into();
    let req = LmmRequest::text(Task::Refine, prompt::render(prompt::SCRIPT_REFINE, &vars)?)
        .with_tag("video_id", script.video_id.clone())
        .with_tag("revision", script.revision.to_string());
    let entries = parse_script_output(&call_text(backend, &req)?, script.duration_s)?;
    let before = script.coverage_s();
    let after = union_len(entries.iter().map(ScriptEntry::interval));
    if after < before * (1.0 - MAX_COVERAGE_LOSS) {
        warn!(before, after, "refinement rejected: coverage shrank too much");
        return Ok(RefineOutcome::Rejected { original: script.clone(), coverage_before: before, coverage_after: after });
    }
    Ok(RefineOutcome::Revised(Script { entries, revision: script.revision + 1, ..script.clone() }))
}
