//! Input generators shared by the benchmarks. Everything is derived from
//! fixed formulas so runs are comparable.

use vidscript_core::media::SyntheticVideo;
use vidscript_core::qa::CorpusEntry;
use vidscript_core::script::EntryKind;
use vidscript_core::{AdCue, Frame, Script, ScriptCorpus, ScriptEntry};

/// Analysis frames of the bundled demo video at `fps`, rendered at
/// `width` pixels wide.
pub fn demo_frames(fps: f64, width: u32) -> Vec<Frame> {
    let video = SyntheticVideo::demo_60s();
    let height = width * video.height / video.width;
    let n = (video.duration_s * fps) as usize;
    (0..n)
        .map(|k| {
            let t = k as f64 / fps;
            Frame::new(t, video.render(t, width, height))
        })
        .collect()
}

/// `n` cues over a video with speech in the first 60% of every 10 s.
pub fn ad_instance(n: usize) -> (Vec<AdCue>, Vec<(f64, f64)>, f64) {
    let duration = 10.0 * n as f64;
    let speech = (0..n).map(|i| (i as f64 * 10.0, i as f64 * 10.0 + 6.0)).collect();
    let cues = (0..n)
        .map(|i| {
            // anchors collide in pairs to exercise the same-anchor search
            let anchor = (i / 2) as f64 * 20.0 + 1.0;
            let words = 3 + (i * 7) % 9;
            AdCue::new(anchor, vec!["word"; words].join(" "), 150.0)
        })
        .collect();
    (cues, speech, duration)
}

/// Two scripts of `entries` consecutive 5 s entries each.
pub fn corpus(entries: usize) -> ScriptCorpus {
    let script = |id: &str| Script {
        video_id: id.into(),
        duration_s: entries as f64 * 5.0,
        entries: (0..entries)
            .map(|i| ScriptEntry {
                start_s: i as f64 * 5.0,
                end_s: i as f64 * 5.0 + 5.0,
                text: format!("entry {i}"),
                kind: EntryKind::Narration,
                speaker: None,
            })
            .collect(),
        summary: None,
        revision: 1,
    };
    ScriptCorpus::new(vec![
        CorpusEntry { video_id: "ep1".into(), label: "Episode 1".into(), script: script("ep1") },
        CorpusEntry { video_id: "ep2".into(), label: "Episode 2".into(), script: script("ep2") },
    ])
    .expect("distinct ids")
}
