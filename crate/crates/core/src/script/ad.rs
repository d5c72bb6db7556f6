//! Audio-description cues: generation from the script and placement into
//! the gaps between speech.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{Script, ScriptError};
use crate::backends::{LmmRequest, ModelBackend, Task};
use crate::interval::complement;
use crate::prompt;
use crate::timecode::{format_hms, format_vtt, parse_hms};
use crate::transcript::Transcript;

pub const DEFAULT_AD_WPM: f64 = 150.0;
/// A cue may start at most this long after its anchor.
pub const PLACEMENT_WINDOW_S: f64 = 30.0;
/// Largest group of same-anchor cues whose placement orders are searched.
const MAX_PERMUTED_GROUP: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdCue {
    /// Where the cue starts once scheduled; equals `anchor_s` before.
    pub start_s: f64,
    pub anchor_s: f64,
    pub text: String,
    pub est_duration_s: f64,
    pub fits: bool,
}

impl AdCue {
    pub fn new(anchor_s: f64, text: impl Into<String>, wpm: f64) -> Self {
        let text = text.into();
        let est = word_count(&text) as f64 / (wpm / 60.0);
        AdCue { start_s: anchor_s, anchor_s, text, est_duration_s: est, fits: false }
    }

    pub fn end_s(&self) -> f64 {
        self.start_s + self.est_duration_s
    }
}

fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

static CUE_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\s*(?:[-*]\s+)?\[\s*([0-9:.]+)\s*(?:[-\u{2013}]\s*[0-9:.]+\s*)?\]\s*(.+)$").expect("valid regex")
});

/// Asks the backend for narration cues. Lines that do not carry an anchor
/// within the video are ignored; no lines at all is an empty list.
pub fn generate_ad(
    script: &Script,
    transcript: &Transcript,
    backend: &dyn ModelBackend,
    wpm: f64,
) -> Result<Vec<AdCue>, ScriptError> {
    if script.is_empty() {
        return Err(ScriptError::InvalidInput("cannot describe an empty script".into()));
    }
    if !(wpm > 0.0) {
        return Err(ScriptError::InvalidInput(format!("speaking rate must be positive, got {wpm}")));
    }
    let mut rows: Vec<(f64, String)> = script.entries.iter().map(|e| (e.start_s, e.to_line())).collect();
    rows.extend(transcript.segments.iter().map(|s| {
        (s.start_s, format!("speech [{} - {}] {}", format_hms(s.start_s), format_hms(s.end_s), s.text.trim()))
    }));
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let input = rows.into_iter().map(|(_, l)| l).collect::<Vec<_>>().join("\n");
    let vars: BTreeMap<&str, String> = [("input", input)].into();
    let req = LmmRequest::text(Task::AudioDescription, prompt::render(prompt::AUDIO_DESCRIPTION, &vars)?)
        .with_tag("video_id", script.video_id.clone());
    // An empty reply is a valid "nothing to describe" answer here.
    let raw = backend.complete(&req)?.text;
    let mut cues: Vec<AdCue> = raw
        .lines()
        .filter_map(|l| CUE_RE.captures(l))
        .filter_map(|c| {
            let t = parse_hms(&c[1])?;
            let text = c[2].trim();
            (t <= script.duration_s && !text.is_empty()).then(|| AdCue::new(t, text, wpm))
        })
        .collect();
    cues.sort_by(|a, b| a.anchor_s.total_cmp(&b.anchor_s));
    Ok(cues)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Placement {
    Full { start: f64 },
    Truncated { start: f64, words: usize },
    Dropped,
}

/// First-fit placement of `cues` in the given order. Returns one placement
/// per cue, indexed like `cues`.
fn place_in_order(cues: &[AdCue], order: &[usize], gaps: &[(f64, f64)]) -> Vec<Placement> {
    let mut free: Vec<(f64, f64)> = gaps.to_vec();
    let mut out = vec![Placement::Dropped; cues.len()];
    for &i in order {
        let cue = &cues[i];
        let latest = cue.anchor_s + PLACEMENT_WINDOW_S;
        let mut placed = None;
        for (gi, &(a, b)) in free.iter().enumerate() {
            let s = a.max(cue.anchor_s);
            if s > latest {
                break;
            }
            if s + cue.est_duration_s <= b {
                placed = Some((gi, s, cue.est_duration_s, Placement::Full { start: s }));
                break;
            }
        }
        if placed.is_none() {
            placed = truncate_into(cue, &free);
        }
        if let Some((gi, s, len, p)) = placed {
            let (a, b) = free[gi];
            let mut pieces = Vec::with_capacity(2);
            if s > a {
                pieces.push((a, s));
            }
            if s + len < b {
                pieces.push((s + len, b));
            }
            free.splice(gi..=gi, pieces);
            out[i] = p;
        }
    }
    out
}

/// The largest word prefix that fits the roomiest gap reachable from the
/// cue's anchor window.
fn truncate_into(cue: &AdCue, free: &[(f64, f64)]) -> Option<(usize, f64, f64, Placement)> {
    let words = word_count(&cue.text);
    if words < 2 {
        return None;
    }
    let per_word = cue.est_duration_s / words as f64;
    let latest = cue.anchor_s + PLACEMENT_WINDOW_S;
    let mut best: Option<(usize, f64, f64)> = None;
    for (gi, &(a, b)) in free.iter().enumerate() {
        let s = a.max(cue.anchor_s);
        if s > latest {
            break;
        }
        let room = b - s;
        if room > 0.0 && best.is_none_or(|(_, _, r)| room > r) {
            best = Some((gi, s, room));
        }
    }
    let (gi, s, room) = best?;
    let b = free[gi].1;
    let mut k = ((room / per_word).floor() as usize).min(words - 1);
    while k > 0 && s + k as f64 * per_word > b {
        k -= 1;
    }
    (k > 0).then_some((gi, s, k as f64 * per_word, Placement::Truncated { start: s, words: k }))
}

fn score(p: &[Placement], cues: &[AdCue]) -> (usize, usize) {
    p.iter().zip(cues).fold((0, 0), |(n, w), (p, c)| match p {
        Placement::Full { .. } => (n + 1, w + word_count(&c.text)),
        Placement::Truncated { words, .. } => (n + 1, w + words),
        Placement::Dropped => (n, w),
    })
}

/// Lexicographic next permutation; false once the last one was reached.
fn next_permutation(v: &mut [usize]) -> bool {
    let Some(i) = (1..v.len()).rev().find(|&i| v[i - 1] < v[i]) else {
        return false;
    };
    let j = (i..v.len()).rev().find(|&j| v[j] > v[i - 1]).expect("successor exists");
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// Places cues into the gaps between speech, in anchor order, each at the
/// earliest start at or after its anchor. Cues that cannot fit whole within
/// the placement window are shortened to a word prefix, and dropped when
/// not even one word fits. Among cues sharing an anchor, the placement
/// order that fits the most cues is used.
///
/// Returns every cue in anchor order; dropped ones have `fits == false`.
pub fn schedule_ad(cues: &[AdCue], speech: &[(f64, f64)], duration_s: f64) -> Vec<AdCue> {
    let mut sorted: Vec<AdCue> = cues.to_vec();
    sorted.sort_by(|a, b| a.anchor_s.total_cmp(&b.anchor_s));
    let gaps = complement(speech.iter().copied(), duration_s);

    let mut order: Vec<usize> = (0..sorted.len()).collect();
    let mut best = place_in_order(&sorted, &order, &gaps);
    let mut group_start = 0;
    while group_start < sorted.len() {
        let anchor = sorted[group_start].anchor_s;
        let group_end = (group_start..sorted.len()).find(|&j| sorted[j].anchor_s != anchor).unwrap_or(sorted.len());
        let n = group_end - group_start;
        if (2..=MAX_PERMUTED_GROUP).contains(&n) {
            let mut perm: Vec<usize> = (group_start..group_end).collect();
            let mut best_score = score(&best, &sorted);
            let mut best_perm = perm.clone();
            while next_permutation(&mut perm) {
                let mut trial = order.clone();
                trial[group_start..group_end].copy_from_slice(&perm);
                let p = place_in_order(&sorted, &trial, &gaps);
                let s = score(&p, &sorted);
                if s > best_score {
                    best_score = s;
                    best = p;
                    best_perm = perm.clone();
                }
            }
            order[group_start..group_end].copy_from_slice(&best_perm);
        }
        group_start = group_end;
    }

    sorted
        .into_iter()
        .zip(best)
        .map(|(mut cue, p)| {
            match p {
                Placement::Full { start } => {
                    cue.start_s = start;
                    cue.fits = true;
                }
                Placement::Truncated { start, words } => {
                    let per_word = cue.est_duration_s / word_count(&cue.text) as f64;
                    cue.text = cue.text.split_whitespace().take(words).collect::<Vec<_>>().join(" ");
                    cue.est_duration_s = per_word * words as f64;
                    cue.start_s = start;
                    cue.fits = true;
                }
                Placement::Dropped => {
                    cue.start_s = cue.anchor_s;
                    cue.fits = false;
                }
            }
            cue
        })
        .collect()
}

/// Sidecar listing what did not make it into the track unchanged.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdReport {
    pub scheduled: usize,
    pub dropped: Vec<AdCue>,
    pub truncated: Vec<AdCue>,
}

impl AdReport {
    /// `original` and `scheduled` must be in the same (anchor) order, as
    /// returned by [`schedule_ad`].
    pub fn new(original: &[AdCue], scheduled: &[AdCue]) -> Self {
        let mut report = AdReport::default();
        let mut sorted = original.to_vec();
        sorted.sort_by(|a, b| a.anchor_s.total_cmp(&b.anchor_s));
        for (o, s) in sorted.iter().zip(scheduled) {
            if !s.fits {
                report.dropped.push(s.clone());
            } else {
                report.scheduled += 1;
                if s.text != o.text {
                    report.truncated.push(s.clone());
                }
            }
        }
        report
    }
}

/// WebVTT rendering of the cues that fit.
pub fn export_webvtt(cues: &[AdCue]) -> String {
    let mut out = String::from("WEBVTT\n");
    for c in cues.iter().filter(|c| c.fits) {
        out.push_str(&format!("\n{} --> {}\n{}\n", format_vtt(c.start_s), format_vtt(c.end_s()), c.text));
    }
    out
}
