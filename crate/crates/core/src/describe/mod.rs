//! Per-clip multimodal prompts and the clip descriptions they produce.

use std::collections::BTreeMap;
use std::ops::ControlFlow;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::backends::{BackendError, LmmRequest, ModelBackend, RetryPolicy, Task};
use crate::knowledge::KnowledgePack;
use crate::media::{downscale_long_edge, sample_clip_timestamps, Decoder, FrameSet, MediaError, MediaInfo};
use crate::prompt::{self, TemplateError};
use crate::scene::Clip;
use crate::timecode::format_hms;
use crate::transcript::TranscriptSegment;
use crate::workpool::map_ordered;

/// Text stored for clips whose description could not be obtained.
pub const PLACEHOLDER_TEXT: &str = "[description unavailable]";
/// Long-edge cap applied to frames before they are sent to the model.
pub const MAX_FRAME_EDGE: u32 = 768;
pub const DEFAULT_FRAMES_PER_CLIP: usize = 10;

#[derive(Debug, Error)]
pub enum DescribeError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("frame set belongs to clip {frames} but clip {clip} was given")]
    FrameSetMismatch { clip: usize, frames: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Media(#[from] MediaError),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("all {0} clips failed to describe")]
    AllClipsFailed(usize),
    #[error("describing interrupted")]
    Aborted,
}

impl DescribeError {
    pub fn code(&self) -> &'static str {
        match self {
            DescribeError::Template(_) => "UnknownTemplate",
            DescribeError::FrameSetMismatch { .. } | DescribeError::InvalidInput(_) => "InvalidInput",
            DescribeError::Backend(e) => e.code(),
            DescribeError::Media(e) => e.code(),
            DescribeError::AllClipsFailed(_) => "AllClipsFailed",
            DescribeError::Aborted => "Aborted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipDescription {
    pub clip_id: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub text: String,
    pub characters_seen: Vec<String>,
    pub backend_id: String,
    pub prompt_fingerprint: String,
    /// Timestamps the frames were sampled at.
    pub frame_timestamps: Vec<f64>,
    pub retries: u32,
    pub placeholder: bool,
}

/// Gallery names that occur in `text` as whole words, in gallery order.
pub fn characters_in(text: &str, gallery: &[&str]) -> Vec<String> {
    gallery
        .iter()
        .filter(|name| !name.is_empty() && contains_word(text, name))
        .map(|n| n.to_string())
        .collect()
}

fn contains_word(haystack: &str, needle: &str) -> bool {
    let is_word = |c: Option<char>| c.is_some_and(|c| c.is_alphanumeric() || c == '_');
    haystack.match_indices(needle).any(|(i, _)| {
        let before = haystack[..i].chars().next_back();
        let after = haystack[i + needle.len()..].chars().next();
        !is_word(before) && !is_word(after)
    })
}

/// Builds the model request for one clip: frames (downscaled) then gallery
/// faces as images, plus the rendered template text.
pub fn assemble_prompt(
    clip: &Clip,
    frame_set: &FrameSet,
    pack: &KnowledgePack,
    clip_asr: &[TranscriptSegment],
    template_id: &str,
) -> Result<LmmRequest, DescribeError> {
    if frame_set.clip_id() != clip.clip_id {
        return Err(DescribeError::FrameSetMismatch { clip: clip.clip_id, frames: frame_set.clip_id() });
    }
    let frame_list = frame_set
        .frames()
        .iter()
        .enumerate()
        .map(|(i, f)| format!("Frame {} at {}", i + 1, format_hms(f.timestamp_s)))
        .collect::<Vec<_>>()
        .join("\n");
    let face_lines = if pack.gallery.is_empty() {
        "(none)".to_string()
    } else {
        pack.gallery
            .iter()
            .enumerate()
            .map(|(i, f)| format!("(face image {}) is {}", i + 1, f.character_name))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let asr = if clip_asr.is_empty() {
        "(no speech)".to_string()
    } else {
        clip_asr
            .iter()
            .map(|s| {
                let who = s.speaker.as_deref().unwrap_or("Unknown speaker");
                format!("[{} - {}] {who}: {}", format_hms(s.start_s), format_hms(s.end_s), s.text)
            })
            .collect::<Vec<_>>()
            .join("\n")
    };
    let context = pack.context_block();
    let vars: BTreeMap<&str, String> = [
        ("clip_range", format!("{} - {}", format_hms(clip.start_s), format_hms(clip.end_s))),
        ("context", if context.is_empty() { String::new() } else { format!("{context}\n") }),
        ("frame_list", frame_list),
        ("face_lines", face_lines),
        ("asr", asr),
    ]
    .into();
    let prompt_text = prompt::render(template_id, &vars)?;
    let mut images: Vec<_> = frame_set
        .frames()
        .iter()
        .map(|f| downscale_long_edge(&f.image, MAX_FRAME_EDGE))
        .collect();
    images.extend(pack.gallery.iter().map(|f| f.image.clone()));
    Ok(LmmRequest {
        task: Task::DescribeClip,
        images,
        prompt_text,
        max_response_tokens: 1024,
        temperature: 0.0,
        tags: [("clip_id".to_string(), clip.clip_id.to_string())].into(),
    })
}

/// One backend round trip with retries. An all-whitespace answer counts as
/// a failed attempt.
pub fn describe_clip(
    clip: &Clip,
    request: &LmmRequest,
    backend: &dyn ModelBackend,
    gallery: &[&str],
    retry: &RetryPolicy,
) -> Result<ClipDescription, BackendError> {
    let (resp, retries) = retry.run(|_| {
        let resp = backend.complete(request)?;
        if resp.text.trim().is_empty() {
            Err(BackendError::EmptyResponse)
        } else {
            Ok(resp)
        }
    })?;
    Ok(ClipDescription {
        clip_id: clip.clip_id,
        start_s: clip.start_s,
        end_s: clip.end_s,
        characters_seen: characters_in(&resp.text, gallery),
        text: resp.text,
        backend_id: backend.id(),
        prompt_fingerprint: request.fingerprint(),
        frame_timestamps: Vec::new(),
        retries,
        placeholder: false,
    })
}

#[derive(Debug, Clone)]
pub struct DescribeOptions {
    pub parallelism: usize,
    pub frames_per_clip: usize,
    pub template_id: String,
    pub retry: RetryPolicy,
}

impl Default for DescribeOptions {
    fn default() -> Self {
        Self {
            parallelism: 4,
            frames_per_clip: DEFAULT_FRAMES_PER_CLIP,
            template_id: prompt::CLIP_DESCRIBE.to_string(),
            retry: RetryPolicy::default(),
        }
    }
}

/// Lets the caller serve descriptions from a cache and observe completions.
pub trait DescribeHooks: Sync {
    fn cached(&self, _clip: &Clip, _fingerprint: &str) -> Option<ClipDescription> {
        None
    }

    /// Called once per finished clip. Returning `Break` stops the run after
    /// in-flight clips finish.
    fn completed(&self, _description: &ClipDescription, _from_cache: bool) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }
}

pub struct NoHooks;
impl DescribeHooks for NoHooks {}

pub struct MediaAsset<'a> {
    pub path: &'a Path,
    pub info: &'a MediaInfo,
    pub decoder: &'a dyn Decoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipFailure {
    pub clip_id: usize,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescribeReport {
    pub descriptions: Vec<ClipDescription>,
    pub failures: Vec<ClipFailure>,
}

fn placeholder(clip: &Clip, backend_id: String, fingerprint: String, timestamps: Vec<f64>) -> ClipDescription {
    ClipDescription {
        clip_id: clip.clip_id,
        start_s: clip.start_s,
        end_s: clip.end_s,
        text: PLACEHOLDER_TEXT.to_string(),
        characters_seen: Vec::new(),
        backend_id,
        prompt_fingerprint: fingerprint,
        frame_timestamps: timestamps,
        retries: 0,
        placeholder: true,
    }
}

/// Describes every clip with at most `parallelism` concurrent backend
/// calls. Frames are decoded per clip inside the worker. Clips that still
/// fail after retries get a placeholder; the run only fails if every clip
/// does.
pub fn describe_all(
    clips: &[Clip],
    asset: &MediaAsset<'_>,
    pack: &KnowledgePack,
    aligned_asr: &BTreeMap<usize, Vec<TranscriptSegment>>,
    backend: &dyn ModelBackend,
    options: &DescribeOptions,
    hooks: &dyn DescribeHooks,
) -> Result<DescribeReport, DescribeError> {
    if clips.is_empty() {
        return Err(DescribeError::InvalidInput("no clips to describe".into()));
    }
    prompt::template_source(&options.template_id)?;
    let gallery = pack.gallery_names();
    let stop = AtomicBool::new(false);
    let no_speech = Vec::new();

    let results = map_ordered(clips, options.parallelism, |_, clip| {
        if stop.load(Ordering::SeqCst) {
            return None;
        }
        let outcome = describe_one(clip, asset, pack, aligned_asr.get(&clip.clip_id).unwrap_or(&no_speech), backend, options, &gallery, hooks);
        let (desc, failure, from_cache) = match outcome {
            Ok((d, cached)) => (d, None, cached),
            Err((d, e)) => {
                warn!(clip = clip.clip_id, error = %e, "clip description failed; using placeholder");
                let f = ClipFailure { clip_id: clip.clip_id, code: e.code().to_string(), message: e.to_string() };
                (d, Some(f), false)
            }
        };
        if hooks.completed(&desc, from_cache).is_break() {
            stop.store(true, Ordering::SeqCst);
        }
        Some((desc, failure))
    });

    if stop.load(Ordering::SeqCst) {
        return Err(DescribeError::Aborted);
    }
    let mut descriptions = Vec::with_capacity(clips.len());
    let mut failures = Vec::new();
    for r in results {
        let (d, f) = r.ok_or(DescribeError::Aborted)?;
        descriptions.push(d);
        failures.extend(f);
    }
    if failures.len() == clips.len() {
        return Err(DescribeError::AllClipsFailed(clips.len()));
    }
    Ok(DescribeReport { descriptions, failures })
}

#[allow(clippy::too_many_arguments, clippy::result_large_err)]
fn describe_one(
    clip: &Clip,
    asset: &MediaAsset<'_>,
    pack: &KnowledgePack,
    asr: &[TranscriptSegment],
    backend: &dyn ModelBackend,
    options: &DescribeOptions,
    gallery: &[&str],
    hooks: &dyn DescribeHooks,
) -> Result<(ClipDescription, bool), (ClipDescription, DescribeError)> {
    let fail = |fp: String, ts: Vec<f64>, e: DescribeError| (placeholder(clip, backend.id(), fp, ts), e);
    let timestamps = sample_clip_timestamps(clip.start_s, clip.end_s, options.frames_per_clip)
        .map_err(|e| fail(String::new(), Vec::new(), e.into()))?;
    let frames = asset
        .decoder
        .extract_frames(asset.path, asset.info, &timestamps)
        .and_then(|f| FrameSet::new(clip.clip_id, f))
        .map_err(|e| fail(String::new(), timestamps.clone(), e.into()))?;
    let request = assemble_prompt(clip, &frames, pack, asr, &options.template_id)
        .map_err(|e| fail(String::new(), timestamps.clone(), e))?;
    let fingerprint = request.fingerprint();
    if let Some(hit) = hooks.cached(clip, &fingerprint) {
        return Ok((hit, true));
    }
    match describe_clip(clip, &request, backend, gallery, &options.retry) {
        Ok(mut d) => {
            d.frame_timestamps = timestamps;
            Ok((d, false))
        }
        Err(e) => Err(fail(fingerprint, timestamps, e.into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whole_word_names() {
        let g = ["Poppy", "Jack Morton", "Al"];
        assert_eq!(characters_in("Poppy waves at Jack Morton.", &g), vec!["Poppy", "Jack Morton"]);
        assert!(characters_in("Poppyseed and Alice", &g).is_empty());
        assert_eq!(characters_in("(Al)", &g), vec!["Al"]);
    }
}
