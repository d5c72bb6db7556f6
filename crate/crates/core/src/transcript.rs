//! Speech transcripts: fetching them from an ASR backend, threading
//! segments into clips, and attributing speakers with the help of the
//! clip descriptions and face gallery.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::warn;

use crate::backends::{AsrBackend, AsrRequest, BackendError, LmmRequest, ModelBackend, Task};
use crate::describe::ClipDescription;
use crate::interval::overlap_len;
use crate::knowledge::KnowledgePack;
use crate::media::MediaInfo;
use crate::prompt;
use crate::scene::Clip;
use crate::timecode::format_hms;
use crate::workpool::map_ordered;

pub const UNKNOWN_SPEAKER: &str = "unknown";

static GENERIC_SPEAKER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^SPEAKER_\d+$").expect("valid regex"));

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("reading media for ASR: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Template(#[from] prompt::TemplateError),
}

impl TranscriptError {
    pub fn code(&self) -> &'static str {
        match self {
            TranscriptError::Backend(e) => e.code(),
            TranscriptError::Io(_) => "IoError",
            TranscriptError::Template(_) => "UnknownTemplate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptSegment {
    pub start_s: f64,
    pub end_s: f64,
    pub text: String,
    pub speaker: Option<String>,
    pub confidence: f64,
}

impl TranscriptSegment {
    pub fn interval(&self) -> (f64, f64) {
        (self.start_s, self.end_s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub segments: Vec<TranscriptSegment>,
    pub language: String,
}

impl Transcript {
    pub fn empty() -> Self {
        Self { segments: Vec::new(), language: "und".to_string() }
    }

    pub fn speech_intervals(&self) -> Vec<(f64, f64)> {
        self.segments.iter().map(TranscriptSegment::interval).collect()
    }
}

pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    let mut f = std::fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Runs ASR over the file. Videos without audio get an empty transcript
/// without touching the backend.
pub fn transcribe(
    path: &Path,
    info: &MediaInfo,
    backend: &dyn AsrBackend,
    language_hint: Option<&str>,
) -> Result<Transcript, TranscriptError> {
    if !info.has_audio {
        return Ok(Transcript::empty());
    }
    let request = AsrRequest {
        path: path.to_path_buf(),
        content_hash: file_sha256(path)?,
        language_hint: language_hint.map(str::to_string),
        duration_hint_s: info.duration_s,
    };
    let response = backend.transcribe(&request)?;
    let duration = info.duration_s;
    let mut segments = Vec::with_capacity(response.segments.len());
    for seg in response.segments {
        if seg.text.trim().is_empty() {
            warn!(start = seg.start_s, "dropping empty ASR segment");
            continue;
        }
        if !(seg.end_s >= seg.start_s) || seg.start_s >= duration {
            warn!(start = seg.start_s, end = seg.end_s, duration, "dropping ASR segment outside the video");
            continue;
        }
        let mut start = seg.start_s;
        let mut end = seg.end_s;
        if start < 0.0 {
            warn!(start, "clamping ASR segment start to 0");
            start = 0.0;
        }
        if end > duration {
            warn!(end, duration, "clamping ASR segment end to video duration");
            end = duration;
        }
        segments.push(TranscriptSegment {
            start_s: start,
            end_s: end,
            text: seg.text,
            speaker: None,
            confidence: seg.confidence.clamp(0.0, 1.0),
        });
    }
    segments.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    Ok(Transcript { segments, language: response.language })
}

/// Clip indices a segment belongs to: the clip holding the larger share of
/// it (earlier clip on ties), or every overlapped clip when it spans three
/// or more.
pub fn owning_clips(seg: (f64, f64), clips: &[Clip]) -> Vec<usize> {
    if clips.is_empty() {
        return Vec::new();
    }
    if seg.1 <= seg.0 {
        let t = seg.0;
        let idx = clips
            .iter()
            .position(|c| t >= c.start_s && t < c.end_s)
            .unwrap_or(if t < clips[0].start_s { 0 } else { clips.len() - 1 });
        return vec![idx];
    }
    let overlapped: Vec<(usize, f64)> = clips
        .iter()
        .enumerate()
        .map(|(i, c)| (i, overlap_len(seg, c.interval())))
        .filter(|(_, o)| *o > 0.0)
        .collect();
    match overlapped.len() {
        0 => {
            let idx = if seg.1 <= clips[0].start_s { 0 } else { clips.len() - 1 };
            vec![idx]
        }
        n if n >= 3 => overlapped.into_iter().map(|(i, _)| i).collect(),
        _ => {
            let mut best = overlapped[0];
            for &(i, o) in &overlapped[1..] {
                if o > best.1 {
                    best = (i, o);
                }
            }
            vec![best.0]
        }
    }
}

/// Threads transcript segments into clips. Every clip id gets an entry,
/// possibly empty.
pub fn align_to_clips(transcript: &Transcript, clips: &[Clip]) -> BTreeMap<usize, Vec<TranscriptSegment>> {
    let mut map: BTreeMap<usize, Vec<TranscriptSegment>> = clips.iter().map(|c| (c.clip_id, Vec::new())).collect();
    for seg in &transcript.segments {
        for idx in owning_clips(seg.interval(), clips) {
            map.entry(clips[idx].clip_id).or_default().push(seg.clone());
        }
    }
    for v in map.values_mut() {
        v.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    }
    map
}

fn sanitize_speaker(answer: &str, gallery: &[&str]) -> Option<String> {
    let cleaned = answer
        .lines()
        .next()
        .unwrap_or("")
        .trim()
        .trim_matches(|c: char| c == '"' || c == '\'' || c == '.' || c == '*')
        .trim();
    if cleaned.eq_ignore_ascii_case(UNKNOWN_SPEAKER) {
        return Some(UNKNOWN_SPEAKER.to_string());
    }
    if GENERIC_SPEAKER.is_match(cleaned) {
        return Some(cleaned.to_string());
    }
    gallery
        .iter()
        .find(|n| n.eq_ignore_ascii_case(cleaned))
        .map(|n| n.to_string())
}

/// Asks the model who speaks each segment. Only gallery names, `unknown`
/// or `SPEAKER_k` labels are ever written; text and timing never change.
/// Segments whose call fails keep `speaker = None`.
pub fn attribute_speakers(
    transcript: &Transcript,
    descriptions: &[ClipDescription],
    pack: &KnowledgePack,
    backend: &dyn ModelBackend,
    parallelism: usize,
) -> Result<Transcript, TranscriptError> {
    let gallery = pack.gallery_names();
    if gallery.is_empty() || transcript.segments.is_empty() || descriptions.is_empty() {
        return Ok(transcript.clone());
    }
    let clips: Vec<Clip> = descriptions
        .iter()
        .map(|d| Clip { clip_id: d.clip_id, start_s: d.start_s, end_s: d.end_s, source: crate::scene::ClipSource::SceneCut })
        .collect();
    let names = gallery.join(", ");
    let mut requests = Vec::with_capacity(transcript.segments.len());
    for seg in &transcript.segments {
        let owners = owning_clips(seg.interval(), &clips);
        let desc_text = owners
            .iter()
            .map(|&i| descriptions[i].text.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        let first = &descriptions[owners[0]];
        let last = &descriptions[*owners.last().expect("non-empty")];
        let vars: BTreeMap<&str, String> = [
            ("clip_range", format!("{} - {}", format_hms(first.start_s), format_hms(last.end_s))),
            ("description", desc_text),
            ("names", names.clone()),
            ("segment_range", format!("{} - {}", format_hms(seg.start_s), format_hms(seg.end_s))),
            ("segment_text", seg.text.clone()),
        ]
        .into();
        let mut req = LmmRequest::text(Task::AttributeSpeaker, prompt::render(prompt::SPEAKER_ATTRIBUTION, &vars)?);
        req.max_response_tokens = 16;
        requests.push(req);
    }
    let answers = map_ordered(&requests, parallelism, |_, req| backend.complete(req));
    let mut out = transcript.clone();
    for (seg, answer) in out.segments.iter_mut().zip(answers) {
        match answer {
            Ok(resp) => match sanitize_speaker(&resp.text, &gallery) {
                Some(name) => seg.speaker = Some(name),
                None => {
                    warn!(answer = %resp.text.trim(), "speaker outside the gallery; using unknown");
                    seg.speaker = Some(UNKNOWN_SPEAKER.to_string());
                }
            },
            Err(e) => {
                warn!(error = %e, start = seg.start_s, "speaker attribution failed");
                seg.speaker = None;
            }
        }
    }
    Ok(out)
}
