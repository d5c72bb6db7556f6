//! Script synthesis, summary, refinement and audio description against
//! scripted backends.

use vidscript_core::backends::{LmmResponse, MockBackend, ScriptedBackend, Task};
use vidscript_core::prompt::input_section;
use vidscript_core::script::{
    export_webvtt, generate_ad, refine, schedule_ad, summarize, synthesize, AdReport, EntryKind, ScriptError,
    SynthesisOptions,
};
use vidscript_core::{ClipDescription, KnowledgePack, Script, ScriptEntry, Transcript};

fn desc(id: usize, s: f64, e: f64, text: &str) -> ClipDescription {
    ClipDescription {
        clip_id: id,
        start_s: s,
        end_s: e,
        text: text.into(),
        characters_seen: vec![],
        backend_id: "t".into(),
        prompt_fingerprint: String::new(),
        frame_timestamps: vec![],
        retries: 0,
        placeholder: false,
    }
}

fn entry(s: f64, e: f64, text: &str) -> ScriptEntry {
    ScriptEntry { start_s: s, end_s: e, text: text.into(), kind: EntryKind::Narration, speaker: None }
}

fn script(entries: Vec<ScriptEntry>, duration: f64) -> Script {
    Script { video_id: "v".into(), duration_s: duration, entries, summary: Some("A short story.".into()), revision: 0 }
}

#[test]
fn single_clip_single_entry() {
    let backend = ScriptedBackend::fixed("llm", "[00:00:00 - 00:00:08] A kettle boils on the stove.");
    let s = synthesize(&[desc(0, 0.0, 8.0, "kettle")], &Transcript::empty(), &KnowledgePack::default(), &backend, &SynthesisOptions::new("v")).unwrap();
    assert_eq!(s.entries, vec![entry(0.0, 8.0, "A kettle boils on the stove.")]);
    assert_eq!(s.revision, 0);
    assert_eq!(backend.call_count(), 1);
}

#[test]
fn entries_are_sorted_and_clamped() {
    let backend = ScriptedBackend::fixed(
        "llm",
        "[00:00:20 - 00:00:25] (event) A door slams.\n[00:00:02 - 00:00:06] (dialogue, Ann) Hello.\n[00:00:28 - 00:00:45] Night falls.",
    );
    let d = [desc(0, 0.0, 15.0, "a"), desc(1, 15.0, 30.0, "b")];
    let s = synthesize(&d, &Transcript::empty(), &KnowledgePack::default(), &backend, &SynthesisOptions::new("v")).unwrap();
    let starts: Vec<f64> = s.entries.iter().map(|e| e.start_s).collect();
    assert_eq!(starts, vec![2.0, 20.0, 28.0]);
    assert_eq!(s.entries[2].end_s, 30.0);
    assert_eq!(s.entries[0].speaker.as_deref(), Some("Ann"));
}

#[test]
fn garbage_output_is_reported_with_raw_text() {
    let raw = "Sure! Here is your script.\nIt was great.\n[00:00:00 - 00:00:03] One real line.";
    let backend = ScriptedBackend::fixed("llm", raw);
    match synthesize(&[desc(0, 0.0, 5.0, "x")], &Transcript::empty(), &KnowledgePack::default(), &backend, &SynthesisOptions::new("v")) {
        Err(ScriptError::UnparseableOutput { valid: 1, lines: 3, raw: r }) => assert_eq!(r, raw),
        other => panic!("{other:?}"),
    }
}

#[test]
fn summary_gets_full_script_or_outline() {
    let s = script((0..40).map(|i| entry(i as f64 * 5.0, i as f64 * 5.0 + 5.0, &format!("Event number {i} happens here."))).collect(), 200.0);
    let backend = ScriptedBackend::fixed("llm", " The story in brief. ");
    let out = summarize(&s, &KnowledgePack::default(), &backend, 100_000).unwrap();
    assert_eq!(out.summary.as_deref(), Some("The story in brief."));
    let full = input_section(&backend.requests()[0].prompt_text).to_string();
    assert!(s.entries.iter().all(|e| full.contains(&e.to_line())));

    summarize(&s, &KnowledgePack::default(), &backend, 60).unwrap();
    let short = backend.requests()[1].prompt_text.clone();
    assert!(short.contains("chunked outline"));
    assert!(!short.contains(&s.entries[1].to_line()));

    let empty = script(vec![], 10.0);
    assert!(matches!(summarize(&empty, &KnowledgePack::default(), &backend, 100), Err(ScriptError::InvalidInput(_))));
}

#[test]
fn refine_fixed_point_rejection_and_single_edit() {
    let s = script(vec![entry(0.0, 10.0, "A man walks in."), entry(10.0, 20.0, "He sits down."), entry(20.0, 40.0, "He leaves.")], 40.0);

    let echo = ScriptedBackend::new("llm", |req, _| Ok(LmmResponse { text: input_section(&req.prompt_text).to_string() }));
    let out = refine(&s, &echo).unwrap();
    assert!(!out.is_rejected());
    let revised = out.into_script();
    assert_eq!(revised.entries, s.entries);
    assert_eq!(revised.revision, 1);

    // half the coverage: rejected, original kept
    let half = ScriptedBackend::fixed("llm", "[00:00:00 - 00:00:20] Everything happens early.");
    let out = refine(&s, &half).unwrap();
    match &out {
        vidscript_core::script::RefineOutcome::Rejected { coverage_before, coverage_after, .. } => {
            assert_eq!((*coverage_before, *coverage_after), (40.0, 20.0));
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(out.into_script(), s);

    let fix = ScriptedBackend::new("llm", |req, _| {
        Ok(LmmResponse { text: input_section(&req.prompt_text).replace("He sits down.", "He sits on the sofa.") })
    });
    let revised = refine(&s, &fix).unwrap().into_script();
    let diffs: Vec<usize> = (0..3).filter(|&i| revised.entries[i] != s.entries[i]).collect();
    assert_eq!(diffs, vec![1]);
    assert_eq!(revised.entries[1].interval(), s.entries[1].interval());

    let mut unsummarized = s.clone();
    unsummarized.summary = None;
    assert!(matches!(refine(&unsummarized, &echo), Err(ScriptError::InvalidInput(_))));
}

#[test]
fn hierarchical_merge_called_once() {
    let d: Vec<ClipDescription> = (0..40).map(|i| desc(i, i as f64 * 3.0, i as f64 * 3.0 + 3.0, &"words ".repeat(60))).collect();
    let backend = MockBackend::new("mock");
    let mut options = SynthesisOptions::new("v");
    options.chunk_budget_tokens = 400;
    let s = synthesize(&d, &Transcript::empty(), &KnowledgePack::default(), &backend, &options).unwrap();
    let tasks: Vec<Task> = backend.call_log().records().iter().filter_map(|r| r.task).collect();
    assert!(tasks.iter().filter(|t| **t == Task::Synthesize).count() >= 4);
    assert_eq!(tasks.iter().filter(|t| **t == Task::Merge).count(), 1);
    assert_eq!(*tasks.last().unwrap(), Task::Merge);
    assert_eq!(s.entries.first().unwrap().start_s, 0.0);
    assert_eq!(s.entries.last().unwrap().end_s, 120.0);
}

#[test]
fn audio_description_round_trip() {
    let s = script(vec![entry(0.0, 60.0, "A long walk through the woods.")], 60.0);
    let backend = ScriptedBackend::fixed(
        "llm",
        "[00:00:05] one two three four five six seven eight nine ten\n[00:00:30] A deer looks up.\n[00:02:00] out of range",
    );
    let cues = generate_ad(&s, &Transcript::empty(), &backend, 150.0).unwrap();
    assert_eq!(cues.len(), 2);
    assert_eq!(cues[0].est_duration_s, 4.0);
    assert!(cues.iter().all(|c| !c.fits));

    // silent film: everything lands on its anchor
    let placed = schedule_ad(&cues, &[], 60.0);
    assert!(placed.iter().all(|c| c.fits && c.start_s == c.anchor_s));
    let vtt = export_webvtt(&placed);
    assert!(vtt.starts_with("WEBVTT\n"));
    assert!(vtt.contains("00:00:05.000 --> 00:00:09.000\none two three four five six seven eight nine ten"));

    let none = ScriptedBackend::fixed("llm", "");
    assert!(generate_ad(&s, &Transcript::empty(), &none, 150.0).unwrap().is_empty());

    // continuous speech: dropped and left out of the track
    let dropped = schedule_ad(&cues, &[(0.0, 60.0)], 60.0);
    assert!(dropped.iter().all(|c| !c.fits));
    assert_eq!(export_webvtt(&dropped), "WEBVTT\n");
    let report = AdReport::new(&cues, &dropped);
    assert_eq!(report.dropped.len(), 2);
}
