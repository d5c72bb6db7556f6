//! HTTP clients against a scripted local server, and fixture record/replay.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use image::RgbImage;
use vidscript_core::backends::{
    AsrBackend, AsrRequest, BackendConfig, BackendError, BackendKind, FixtureFile, HttpAsrBackend, HttpModelBackend,
    LmmRequest, MockBackend, ModelBackend, RecordingBackend, Task,
};

/// Answers each request with the next (status, body) pair, repeating the
/// last one. Returns the base URL plus the arrival times and bodies seen.
struct Stub {
    url: String,
    hits: Arc<Mutex<Vec<(Instant, String)>>>,
}

fn stub(responses: Vec<(u16, &'static str)>) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/complete", listener.local_addr().unwrap());
    let hits = Arc::new(Mutex::new(Vec::new()));
    let seen = hits.clone();
    std::thread::spawn(move || {
        for (i, conn) in listener.incoming().enumerate() {
            let Ok(mut conn) = conn else { return };
            let mut reader = BufReader::new(conn.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap_or(0);
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0; len];
            let _ = reader.read_exact(&mut body);
            seen.lock().unwrap().push((Instant::now(), String::from_utf8_lossy(&body).into_owned()));
            let (status, text) = responses[i.min(responses.len() - 1)];
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                text.len()
            );
            let _ = conn.write_all(reply.as_bytes());
        }
    });
    Stub { url, hits }
}

fn config(kind: BackendKind, url: &str, key_env: &str) -> BackendConfig {
    // each test uses its own variable so parallel tests do not race
    unsafe { std::env::set_var(key_env, "test-key") };
    BackendConfig {
        credential_env: key_env.into(),
        base_backoff_s: 0.01,
        max_retries: 2,
        rate_limit_rps: 1000.0,
        ..BackendConfig::http(kind, url)
    }
}

#[test]
fn throttled_then_ok_retries_once() {
    let s = stub(vec![(429, r#"{"error":"slow down"}"#), (200, r#"{"text":"a sunny street"}"#)]);
    let backend = HttpModelBackend::new(config(BackendKind::Lmm, &s.url, "VS_TEST_KEY_A")).unwrap();
    let mut req = LmmRequest::text(Task::DescribeClip, "describe");
    req.images.push(RgbImage::from_pixel(2, 2, image::Rgb([1, 2, 3])));
    let resp = backend.complete(&req).unwrap();
    assert_eq!(resp.text, "a sunny street");
    let outcomes: Vec<String> = backend.call_log().records().into_iter().map(|r| r.outcome).collect();
    assert_eq!(outcomes, vec!["BackendError".to_string(), "ok".to_string()]);
    // wire body carries base64 PNG images and the prompt
    let hits = s.hits.lock().unwrap();
    let body: serde_json::Value = serde_json::from_str(&hits[1].1).unwrap();
    assert_eq!(body["prompt_text"], "describe");
    assert_eq!(body["images"].as_array().unwrap().len(), 1);
}

#[test]
fn client_errors_are_not_retried_and_missing_key_is_reported() {
    let s = stub(vec![(400, r#"{"error":"bad"}"#)]);
    let backend = HttpModelBackend::new(config(BackendKind::Llm, &s.url, "VS_TEST_KEY_B")).unwrap();
    match backend.complete(&LmmRequest::text(Task::Answer, "q")) {
        Err(BackendError::Status { status: 400, body }) => assert!(body.contains("bad")),
        other => panic!("{other:?}"),
    }
    assert_eq!(s.hits.lock().unwrap().len(), 1);

    let mut cfg = config(BackendKind::Llm, &s.url, "VS_TEST_KEY_B");
    cfg.credential_env = "VS_TEST_KEY_NEVER_SET".into();
    let backend = HttpModelBackend::new(cfg).unwrap();
    assert!(matches!(backend.complete(&LmmRequest::text(Task::Answer, "q")), Err(BackendError::AuthMissing(_))));

    let down = HttpModelBackend::new(config(BackendKind::Llm, "http://127.0.0.1:9/none", "VS_TEST_KEY_B")).unwrap();
    assert_eq!(down.complete(&LmmRequest::text(Task::Answer, "q")).unwrap_err().code(), "BackendUnavailable");
}

#[test]
fn asr_over_http() {
    let s = stub(vec![(200, r#"{"segments":[{"start_s":1.0,"end_s":2.5,"text":"hi","confidence":0.7}],"language":"en"}"#)]);
    let backend = HttpAsrBackend::new(config(BackendKind::Asr, &s.url, "VS_TEST_KEY_C")).unwrap();
    let resp = backend
        .transcribe(&AsrRequest { path: "/tmp/x.mp4".into(), content_hash: "00".into(), language_hint: Some("en".into()), duration_hint_s: 10.0 })
        .unwrap();
    assert_eq!(resp.segments.len(), 1);
    assert_eq!(resp.segments[0].text, "hi");
}

#[test]
fn token_bucket_bounds_issued_requests() {
    let s = stub(vec![(200, r#"{"text":"ok"}"#)]);
    let rps = 20.0;
    let mut cfg = config(BackendKind::Llm, &s.url, "VS_TEST_KEY_D");
    cfg.rate_limit_rps = rps;
    let backend = Arc::new(HttpModelBackend::new(cfg).unwrap());
    let started = Instant::now();
    let workers: Vec<_> = (0..8)
        .map(|w| {
            let b = backend.clone();
            std::thread::spawn(move || {
                let mut i = 0;
                while started.elapsed() < Duration::from_millis(2500) {
                    b.complete(&LmmRequest::text(Task::Answer, format!("{w}-{i}"))).unwrap();
                    i += 1;
                }
            })
        })
        .collect();
    for w in workers {
        w.join().unwrap();
    }
    let times: Vec<f64> = s.hits.lock().unwrap().iter().map(|(t, _)| t.duration_since(started).as_secs_f64()).collect();
    let burst = rps.ceil();
    // every window [t, t + w) starting at an arrival, for several widths
    for w in [0.5, 1.0, 2.0] {
        for &t0 in &times {
            let n = times.iter().filter(|&&t| t >= t0 && t < t0 + w).count() as f64;
            assert!(n <= rps * w + burst, "{n} requests in {w}s window at {t0}");
        }
    }
    assert!(times.len() as f64 >= rps * 2.0, "only {} requests issued", times.len());
}

#[test]
fn record_then_replay_without_live_calls() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = dir.path().join("lmm.ndjson");
    let s = stub(vec![(200, r#"{"text":"recorded answer"}"#)]);
    let live = HttpModelBackend::new(config(BackendKind::Lmm, &s.url, "VS_TEST_KEY_E")).unwrap();
    let recorder = RecordingBackend::new(live, BackendKind::Lmm, &fixture).unwrap();
    let req = LmmRequest::text(Task::DescribeClip, "what is in the frame?");
    assert_eq!(recorder.complete(&req).unwrap().text, "recorded answer");
    assert_eq!(FixtureFile::open(&fixture).unwrap().records().len(), 1);
    assert_eq!(s.hits.lock().unwrap().len(), 1);

    let replay = MockBackend::from_fixture_file("replay", BackendKind::Lmm, &fixture).unwrap();
    assert_eq!(replay.complete(&req).unwrap().text, "recorded answer");
    assert_eq!(s.hits.lock().unwrap().len(), 1);
}

#[test]
fn same_fingerprint_different_payload_conflicts() {
    let dir = tempfile::tempdir().unwrap();
    let file = FixtureFile::open(&dir.path().join("f.ndjson")).unwrap();
    // identical content, built twice, fingerprints the same
    let a = LmmRequest::text(Task::Summarize, "caf\u{e9}");
    let b = LmmRequest::text(Task::Summarize, "cafe\u{301}");
    assert_eq!(a.fingerprint(), b.fingerprint());
    file.record(BackendKind::Llm, &a.fingerprint(), serde_json::json!({"text": "one"})).unwrap();
    file.record(BackendKind::Llm, &b.fingerprint(), serde_json::json!({"text": "one"})).unwrap();
    assert!(matches!(
        file.record(BackendKind::Llm, &b.fingerprint(), serde_json::json!({"text": "two"})),
        Err(BackendError::FixtureConflict(_))
    ));
    assert_eq!(file.records().len(), 1);
}

#[test]
fn fingerprint_is_sha256_of_canonical_json() {
    use sha2::Digest;
    let req = LmmRequest::text(Task::Answer, "hello").with_tag("video_id", "ep1");
    let canonical = r#"{"images":[],"max_response_tokens":2048,"prompt_text":"hello","tags":{"video_id":"ep1"},"task":"answer","temperature":"0.000"}"#;
    let expected = hex::encode(sha2::Sha256::digest(canonical.as_bytes()));
    assert_eq!(req.fingerprint(), expected);
}
