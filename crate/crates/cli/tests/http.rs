//! The HTTP API driven in-process through the router.

use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use image::RgbImage;
use serde_json::{json, Value};
use tower::ServiceExt;
use vidscript_cli::hub::Hub;
use vidscript_cli::options;
use vidscript_cli::server::{router, AppState, HubSink, ServiceConfig};
use vidscript_core::agent::{environment_from_name, replay_episode, EpisodeLog};
use vidscript_core::backends::encode_png;
use vidscript_core::media::SyntheticVideo;
use vidscript_core::pipeline::Backends;
use vidscript_core::{GroundedAnswer, Job, JobConfig, KnowledgePack, Pipeline};

const BOUNDARY: &str = "vidscript-test-boundary";

struct Service {
    app: Router,
    pipeline: Arc<Pipeline>,
    dir: tempfile::TempDir,
}

fn service() -> Service {
    let dir = tempfile::tempdir().unwrap();
    let console = dir.path().join("console");
    std::fs::create_dir_all(&console).unwrap();
    std::fs::write(console.join("index.html"), "<h1>vidscript console</h1>").unwrap();
    std::fs::write(console.join("app.js"), "console.log('ok');").unwrap();
    let hub = Arc::new(Hub::new());
    let pipeline = Arc::new(
        options::open_pipeline(&dir.path().join("data/store.jsonl"), Backends::mock())
            .unwrap()
            .with_sink(Arc::new(HubSink(hub.clone()))),
    );
    let config = ServiceConfig {
        data_dir: dir.path().join("data"),
        console_dir: console.clone(),
        max_jobs: 2,
        review_timeout: Duration::from_secs(30),
    };
    let state = AppState::new(pipeline.clone(), hub, &config);
    Service { app: router(state, &console), pipeline, dir }
}

fn short_video() -> Vec<u8> {
    let mut v = SyntheticVideo::demo_60s();
    v.duration_s = 25.0;
    v.segments.retain(|s| s.start_s < 25.0);
    v.segments.last_mut().unwrap().end_s = 25.0;
    v.to_bytes()
}

enum Part<'a> {
    Text(&'a str, &'a str),
    File(&'a str, &'a str, Vec<u8>),
}

fn multipart(parts: &[Part<'_>]) -> Request<Body> {
    let mut body = Vec::new();
    for p in parts {
        body.extend_from_slice(format!("--{BOUNDARY}\r\n").as_bytes());
        match p {
            Part::Text(name, value) => {
                body.extend_from_slice(format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n{value}\r\n").as_bytes());
            }
            Part::File(name, file, bytes) => {
                body.extend_from_slice(
                    format!("Content-Disposition: form-data; name=\"{name}\"; filename=\"{file}\"\r\nContent-Type: application/octet-stream\r\n\r\n")
                        .as_bytes(),
                );
                body.extend_from_slice(bytes);
                body.extend_from_slice(b"\r\n");
            }
        }
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    Request::post("/v1/jobs")
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(body))
        .unwrap()
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post_json(uri: &str, body: Value) -> Request<Body> {
    Request::post(uri).header(header::CONTENT_TYPE, "application/json").body(Body::from(body.to_string())).unwrap()
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, String, String) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let ctype = resp.headers().get(header::CONTENT_TYPE).map(|v| v.to_str().unwrap().to_string()).unwrap_or_default();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, ctype, String::from_utf8(bytes.to_vec()).unwrap())
}

async fn send_json(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let (status, _, body) = send(app, req).await;
    (status, serde_json::from_str(&body).unwrap_or(Value::Null))
}

fn error_code(v: &Value) -> &str {
    v["code"].as_str().unwrap_or_default()
}

/// Reads an event stream one record at a time.
struct Events {
    body: Body,
    buf: String,
}

impl Events {
    async fn open(app: &Router, uri: &str) -> Self {
        let resp = app.clone().oneshot(get(uri)).await.unwrap();
        assert_eq!(resp.status(), StatusCode::OK);
        assert_eq!(resp.headers()[header::CONTENT_TYPE], "application/x-ndjson");
        Self { body: resp.into_body(), buf: String::new() }
    }

    async fn next(&mut self) -> Option<Value> {
        loop {
            if let Some(i) = self.buf.find('\n') {
                let line: String = self.buf.drain(..=i).collect();
                return Some(serde_json::from_str(line.trim()).unwrap());
            }
            let frame = tokio::time::timeout(Duration::from_secs(60), self.body.frame()).await.expect("event within 60 s")?;
            if let Ok(data) = frame.unwrap().into_data() {
                self.buf.push_str(std::str::from_utf8(&data).unwrap());
            }
        }
    }

    async fn rest(mut self) -> Vec<Value> {
        let mut out = Vec::new();
        while let Some(v) = self.next().await {
            out.push(v);
        }
        out
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn upload_process_and_read_back() {
    let s = service();
    let video = short_video();
    let upload = || {
        multipart(&[
            Part::File("file", "short.vsyn", video.clone()),
            Part::Text("title", "Pilot"),
            Part::Text("meta", "season=2"),
            Part::Text("ad", "true"),
        ])
    };
    let (status, v) = send_json(&s.app, upload()).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{v}");
    let job_id = v["job_id"].as_str().unwrap().to_string();

    // stage changes and per-clip completions, then the stream ends
    let events = Events::open(&s.app, &format!("/v1/jobs/{job_id}/events")).await.rest().await;
    let stages: Vec<&str> =
        events.iter().filter(|e| e["event"] == "stage_changed").map(|e| e["stage"].as_str().unwrap()).collect();
    assert_eq!(stages, ["probing", "segmenting", "transcribing", "describing", "synthesizing", "refining", "done"]);
    let clips: Vec<u64> =
        events.iter().filter(|e| e["event"] == "clip_described").map(|e| e["completed"].as_u64().unwrap()).collect();
    assert!(!clips.is_empty());
    assert!(clips.windows(2).all(|w| w[0] < w[1]));

    let (status, job) = send_json(&s.app, get(&format!("/v1/jobs/{job_id}"))).await;
    assert_eq!(status, StatusCode::OK);
    let job: Job = serde_json::from_value(job).unwrap();
    assert_eq!((job.progress, job.pack.title.as_deref()), (1.0, Some("Pilot")));
    assert_eq!(job.pack.metadata["season"], "2");

    let (status, ctype, script) = send(&s.app, get(&format!("/v1/jobs/{job_id}/script"))).await;
    assert_eq!((status, ctype.as_str()), (StatusCode::OK, "application/json"));
    assert_eq!(script, s.pipeline.script_payload(&job_id).unwrap());

    let (status, ctype, vtt) = send(&s.app, get(&format!("/v1/jobs/{job_id}/ad.vtt"))).await;
    assert_eq!(status, StatusCode::OK);
    assert!(ctype.starts_with("text/vtt"));
    assert!(vtt.starts_with("WEBVTT"));

    // same bytes and settings: same job, nothing re-run
    let (status, again) = send_json(&s.app, upload()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(again["job_id"], job_id.as_str());
    assert_eq!(again["stage"], "done");

    let (_, list) = send_json(&s.app, get("/v1/jobs")).await;
    assert_eq!(list.as_array().unwrap().len(), 1);
    // the upload was stored under its content hash
    let uploads: Vec<_> = std::fs::read_dir(s.dir.path().join("data/uploads")).unwrap().collect();
    assert_eq!(uploads.len(), 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn upload_with_faces() {
    let s = service();
    let face = encode_png(&RgbImage::from_pixel(8, 8, image::Rgb([200, 120, 90])));
    let (status, v) = send_json(
        &s.app,
        multipart(&[
            Part::File("file", "v.vsyn", short_video()),
            Part::File("face", "Jack_Morton.png", face.clone()),
            Part::File("face", "Poppy.png", face.clone()),
        ]),
    )
    .await;
    assert_eq!(status, StatusCode::ACCEPTED, "{v}");
    let job = s.pipeline.job(v["job_id"].as_str().unwrap()).unwrap();
    assert_eq!(job.pack.gallery_names(), vec!["Jack Morton", "Poppy"]);

    let (status, v) = send_json(
        &s.app,
        multipart(&[
            Part::File("file", "v.vsyn", short_video()),
            Part::File("face", "Jack_Morton.png", face.clone()),
            Part::File("face", "Jack Morton.png", face),
        ]),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&v), "DuplicateName");
}

#[tokio::test(flavor = "multi_thread")]
async fn bad_uploads_get_structured_errors() {
    let s = service();
    let cases = [
        (multipart(&[Part::Text("title", "no file")]), "InvalidInput"),
        (multipart(&[Part::File("file", "v.vsyn", short_video()), Part::Text("colour", "red")]), "InvalidInput"),
        (multipart(&[Part::File("file", "v.vsyn", short_video()), Part::Text("meta", "novalue")]), "InvalidInput"),
        (multipart(&[Part::File("file", "v.vsyn", short_video()), Part::Text("threshold", "high")]), "InvalidInput"),
        (multipart(&[Part::File("file", "v.vsyn", short_video()), Part::Text("frames_per_clip", "0")]), "InvalidConfig"),
    ];
    for (req, code) in cases {
        let (status, v) = send_json(&s.app, req).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{v}");
        assert_eq!(error_code(&v), code, "{v}");
        assert!(v["message"].as_str().is_some_and(|m| !m.is_empty()));
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn read_side_errors() {
    let s = service();
    let (status, v) = send_json(&s.app, get("/v1/jobs/job-nope")).await;
    assert_eq!((status, error_code(&v)), (StatusCode::NOT_FOUND, "UnknownJob"));
    let (status, _) = send_json(&s.app, get("/v1/jobs/job-nope/events")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    // a job this server never ran: a one-line snapshot, then the end
    let path = s.dir.path().join("queued.vsyn");
    std::fs::write(&path, short_video()).unwrap();
    let id = s.pipeline.submit_job(&path, KnowledgePack::default(), JobConfig::default()).unwrap();
    let events = Events::open(&s.app, &format!("/v1/jobs/{id}/events")).await.rest().await;
    assert_eq!(events, vec![json!({"event": "stage_changed", "job_id": id, "stage": "queued", "progress": 0.0})]);

    let (status, v) = send_json(&s.app, get(&format!("/v1/jobs/{id}/script"))).await;
    assert_eq!((status, error_code(&v)), (StatusCode::CONFLICT, "JobNotDone"));
    assert_eq!(v["stage"], "queued");
    let (status, v) = send_json(&s.app, post_json("/v1/qa", json!({"job_ids": [id], "question": "What?"}))).await;
    assert_eq!((status, error_code(&v)), (StatusCode::CONFLICT, "JobNotDone"));
}

#[tokio::test(flavor = "multi_thread")]
async fn qa_over_two_jobs() {
    let s = service();
    let mut ids = Vec::new();
    for (name, title) in [("a.vsyn", "Episode 1"), ("b.vsyn", "Episode 2")] {
        let path = s.dir.path().join(name);
        std::fs::write(&path, short_video()).unwrap();
        let pack = KnowledgePack { title: Some(title.into()), ..KnowledgePack::default() };
        let id = s.pipeline.submit_job(&path, pack, JobConfig::default()).unwrap();
        s.pipeline.run_to_completion(&id).unwrap();
        ids.push(id);
    }
    let (status, v) = send_json(&s.app, post_json("/v1/qa", json!({"job_ids": ids, "question": "What happens?"}))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let answer: GroundedAnswer = serde_json::from_value(v).unwrap();
    assert!(answer.verified);
    assert!(answer.citations.iter().all(|c| ids.contains(&c.video_id)));

    for body in [json!({"job_ids": [], "question": "q"}), json!({"question": "q"})] {
        let (status, v) = send_json(&s.app, post_json("/v1/qa", body)).await;
        assert_eq!((status, error_code(&v)), (StatusCode::BAD_REQUEST, "InvalidInput"));
    }
    let raw = Request::post("/v1/qa").body(Body::from("{not json")).unwrap();
    let (status, v) = send_json(&s.app, raw).await;
    assert_eq!((status, error_code(&v)), (StatusCode::BAD_REQUEST, "InvalidInput"));
}

#[tokio::test(flavor = "multi_thread")]
async fn unattended_agent_episode() {
    let s = service();
    let (status, v) = send_json(&s.app, post_json("/v1/agent", json!({"env": "grid", "max_steps": 3, "seed": 4}))).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{v}");
    let ep = v["episode_id"].as_str().unwrap().to_string();
    let events = Events::open(&s.app, &format!("/v1/agent/{ep}/events")).await.rest().await;
    let kinds: Vec<&str> = events.iter().map(|e| e["event"].as_str().unwrap()).collect();
    assert_eq!(kinds, ["episode_started", "step", "step", "step", "episode_finished"]);
    assert_eq!(events[0]["actions"][0], "move_right");
    // windows grow to three frames
    let windows: Vec<usize> = events[1..4].iter().map(|e| e["record"]["window_timestamps"].as_array().unwrap().len()).collect();
    assert_eq!(windows, [1, 2, 3]);

    let log_path = events[4]["log_path"].as_str().unwrap();
    let log = EpisodeLog::read_from(std::io::BufReader::new(std::fs::File::open(log_path).unwrap())).unwrap();
    assert_eq!(log.len(), 3);
    let mut env = environment_from_name(&log.header.environment).unwrap();
    replay_episode(&log, env.as_mut()).unwrap();

    let (status, v) = send_json(&s.app, post_json(&format!("/v1/agent/{ep}/action"), json!({"approve": true}))).await;
    assert_eq!((status, error_code(&v)), (StatusCode::CONFLICT, "NoPendingAction"));
    let (status, v) = send_json(&s.app, post_json("/v1/agent", json!({"env": "pong"}))).await;
    assert_eq!((status, error_code(&v)), (StatusCode::BAD_REQUEST, "InvalidInput"));
    let (status, v) = send_json(&s.app, post_json("/v1/agent", json!({"env": "grid", "max_steps": 0}))).await;
    assert_eq!((status, error_code(&v)), (StatusCode::BAD_REQUEST, "InvalidInput"));
    let (status, v) = send_json(&s.app, get("/v1/agent/ep-missing/events")).await;
    assert_eq!((status, error_code(&v)), (StatusCode::NOT_FOUND, "UnknownEpisode"));
}

#[tokio::test(flavor = "multi_thread")]
async fn operator_steers_an_interactive_episode() {
    let s = service();
    let (_, v) = send_json(&s.app, post_json("/v1/agent", json!({"env": "grid", "max_steps": 2, "interactive": true}))).await;
    let ep = v["episode_id"].as_str().unwrap().to_string();
    let action = |body: Value| post_json(&format!("/v1/agent/{ep}/action"), body);
    let mut events = Events::open(&s.app, &format!("/v1/agent/{ep}/events")).await;
    assert_eq!(events.next().await.unwrap()["event"], "episode_started");

    let p0 = events.next().await.unwrap();
    assert_eq!((p0["event"].as_str(), p0["step"].as_u64()), (Some("proposal"), Some(0)));
    assert_eq!(p0["action"]["name"], "move_right");

    let (status, v) = send_json(&s.app, action(json!({"step": 1, "approve": true}))).await;
    assert_eq!((status, error_code(&v)), (StatusCode::CONFLICT, "StaleStep"));
    let (status, v) = send_json(&s.app, action(json!({"step": 0, "override": "fly"}))).await;
    assert_eq!((status, error_code(&v)), (StatusCode::BAD_REQUEST, "InvalidAction"));
    let (status, v) = send_json(&s.app, action(json!({"step": 0, "approve": true, "override": "jump"}))).await;
    assert_eq!((status, error_code(&v)), (StatusCode::BAD_REQUEST, "InvalidInput"));
    let (status, v) = send_json(&s.app, post_json("/v1/agent/ep-missing/action", json!({"approve": true}))).await;
    assert_eq!((status, error_code(&v)), (StatusCode::NOT_FOUND, "UnknownEpisode"));

    let (status, v) = send_json(&s.app, action(json!({"step": 0, "override": "jump"}))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!((v["step"].as_u64(), v["decision"].as_str()), (Some(0), Some("override:jump")));
    // the step is only shown as taken once the server reports it
    let s0 = events.next().await.unwrap();
    assert_eq!(s0["event"], "step");
    assert_eq!(s0["record"]["action"]["name"], "jump");
    assert_eq!(s0["record"]["proposed"]["name"], "move_right");

    let p1 = events.next().await.unwrap();
    assert_eq!((p1["event"].as_str(), p1["step"].as_u64()), (Some("proposal"), Some(1)));
    let (status, _) = send_json(&s.app, action(json!({"approve": true}))).await;
    assert_eq!(status, StatusCode::OK);
    let s1 = events.next().await.unwrap();
    assert_eq!(s1["record"]["action"]["name"], "move_right");
    assert!(s1["record"].get("proposed").is_none());
    let end = events.next().await.unwrap();
    assert_eq!((end["event"].as_str(), end["steps"].as_u64()), (Some("episode_finished"), Some(2)));
    assert!(events.next().await.is_none());
}

#[tokio::test(flavor = "multi_thread")]
async fn operator_abort_ends_the_episode() {
    let s = service();
    let (_, v) = send_json(&s.app, post_json("/v1/agent", json!({"env": "gui-script", "max_steps": 5, "interactive": true}))).await;
    let ep = v["episode_id"].as_str().unwrap().to_string();
    let mut events = Events::open(&s.app, &format!("/v1/agent/{ep}/events")).await;
    events.next().await.unwrap();
    assert_eq!(events.next().await.unwrap()["event"], "proposal");
    let (status, _) = send_json(&s.app, post_json(&format!("/v1/agent/{ep}/action"), json!({"step": 0, "abort": true}))).await;
    assert_eq!(status, StatusCode::OK);
    let end = events.next().await.unwrap();
    assert_eq!((end["event"].as_str(), end["code"].as_str()), (Some("episode_failed"), Some("Aborted")));
}

#[tokio::test(flavor = "multi_thread")]
async fn console_is_served_statically() {
    let s = service();
    let (status, ctype, body) = send(&s.app, get("/console/")).await;
    assert_eq!(status, StatusCode::OK);
    assert!(ctype.starts_with("text/html"));
    assert!(body.contains("vidscript console"));
    let (status, ctype, _) = send(&s.app, get("/console/app.js")).await;
    assert_eq!(status, StatusCode::OK);
    assert!(ctype.contains("javascript"));
    let (status, _, _) = send(&s.app, get("/console/missing.css")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let resp = s.app.clone().oneshot(get("/console")).await.unwrap();
    assert!(resp.status().is_redirection());
    assert_eq!(resp.headers()[header::LOCATION], "/console/");
    let resp = s.app.clone().oneshot(get("/")).await.unwrap();
    assert_eq!(resp.headers()[header::LOCATION], "/console/");
}
