//! The `vidscript` binary end to end.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use vidscript_core::media::SyntheticVideo;
use vidscript_core::GroundedAnswer;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        SyntheticVideo::demo_60s().write(&dir.path().join("demo.vsyn")).unwrap();
        Self { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn cmd(&self) -> Command {
        let mut c = Command::new(env!("CARGO_BIN_EXE_vidscript"));
        c.current_dir(self.dir.path()).env("VIDSCRIPT_STORE", self.path("data/store.jsonl")).env_remove("VIDSCRIPT_LOG");
        c
    }

    fn run(&self, args: &[&str]) -> Output {
        self.cmd().args(args).output().unwrap()
    }

    fn process(&self) -> String {
        let out = self.run(&["process", "demo.vsyn", "--title", "Pilot", "--meta", "season=2", "--ad", "--out", "out"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        stdout(&out).lines().next().unwrap().to_string()
    }
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

#[test]
fn process_writes_outputs_and_is_idempotent() {
    let sb = Sandbox::new();
    let id = sb.process();
    assert!(id.starts_with("job-"));
    for f in ["script.json", "script.txt", "ad.vtt", "ad_report.json"] {
        assert!(sb.path("out").join(f).is_file(), "{f}");
    }
    let lines = std::fs::read_to_string(sb.path("out/script.txt")).unwrap();
    assert!(lines.lines().all(|l| l.starts_with("[00:")));
    assert!(std::fs::read_to_string(sb.path("out/ad.vtt")).unwrap().starts_with("WEBVTT"));
    let first = std::fs::read(sb.path("out/script.json")).unwrap();

    // resubmission finds the finished job
    let again = sb.run(&["process", "demo.vsyn", "--title", "Pilot", "--meta", "season=2", "--ad", "--out", "out2"]);
    assert_eq!(stdout(&again).lines().next(), Some(id.as_str()));
    assert!(!stderr(&again).contains("stage probing"));
    assert_eq!(std::fs::read(sb.path("out2/script.json")).unwrap(), first);

    // without --out the script goes to stdout
    let plain = sb.run(&["process", "demo.vsyn", "--title", "Pilot", "--meta", "season=2", "--ad"]);
    assert!(stdout(&plain).lines().skip(1).all(|l| l.starts_with("[00:")));
}

#[test]
fn process_reports_bad_input() {
    let sb = Sandbox::new();
    let out = sb.run(&["process", "missing.mp4"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("file not found"));
    let out = sb.run(&["process", "demo.vsyn", "--meta", "novalue"]);
    assert_eq!(out.status.code(), Some(1));
    let out = sb.run(&["process", "demo.vsyn", "--faces", "nowhere"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn http_backend_needs_an_endpoint() {
    let sb = Sandbox::new();
    let out = sb.cmd().args(["--backend", "http", "process", "demo.vsyn"]).env_remove("VIDSCRIPT_LMM_ENDPOINT").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("is not set"), "{}", stderr(&out));
}

#[test]
fn qa_and_locate() {
    let sb = Sandbox::new();
    let id = sb.process();
    let out = sb.run(&["qa", &id, "How does it start?"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains(&format!("[{id} @ 00:00:00")));
    assert!(text.trim_end().ends_with("verified: yes"));

    let out = sb.run(&["qa", &id, "How does it start?", "--json"]);
    let answer: GroundedAnswer = serde_json::from_str(&stdout(&out)).unwrap();
    assert!(answer.verified);

    let out = sb.run(&["qa", "job-nope", "Anything?"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("unknown job"));

    let out = sb.run(&["locate", &id, "the conversation", "-k", "2"]);
    assert!(out.status.success());
    let rows: Vec<String> = stdout(&out).lines().map(str::to_string).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.starts_with(&format!("[{id} @ "))));
}

#[test]
fn agent_log_replays() {
    let sb = Sandbox::new();
    let out = sb.run(&["agent", "--env", "grid", "--max-steps", "4", "--seed", "3", "--log", "ep.ndjson"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().count(), 4);
    let out = sb.run(&["replay", "ep.ndjson"]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("replayed 4 steps"));

    // a doctored outcome is caught
    let log = std::fs::read_to_string(sb.path("ep.ndjson")).unwrap();
    let doctored = log.replacen("\"terminal\":false", "\"terminal\":true", 1);
    assert_ne!(doctored, log);
    std::fs::write(sb.path("bad.ndjson"), doctored).unwrap();
    let out = sb.run(&["replay", "bad.ndjson"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("diverged"));

    let out = sb.run(&["replay", "nothing.ndjson"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn interactive_agent_takes_terminal_decisions() {
    let sb = Sandbox::new();
    let mut child = sb
        .cmd()
        .args(["agent", "--env", "grid", "--max-steps", "3", "--interactive", "--log", "ep.ndjson"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    // approve, a typo then an override, approve
    child.stdin.take().unwrap().write_all(b"\nfly\njump\ny\n").unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stderr(&out).contains("\"fly\" is not an action"));
    let actions: Vec<String> =
        stdout(&out).lines().map(|l| l.split_whitespace().nth(1).unwrap().to_string()).collect();
    assert_eq!(actions, ["move_right()", "jump()", "move_right()"]);

    // closing stdin aborts the episode
    let out = sb.cmd().args(["agent", "--env", "gui-script", "--interactive"]).stdin(Stdio::null()).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("aborted"));
}

fn http_get(addr: &str, path: &str) -> (u16, String) {
    let mut s = TcpStream::connect(addr).unwrap();
    write!(s, "GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut resp = String::new();
    s.read_to_string(&mut resp).unwrap();
    let status = resp.split_whitespace().nth(1).unwrap().parse().unwrap();
    let body = resp.split_once("\r\n\r\n").map(|(_, b)| b.to_string()).unwrap_or_default();
    (status, body)
}

struct Server(std::process::Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn serve(sb: &Sandbox, console: &Path) -> (Server, String) {
    let mut child = sb
        .cmd()
        .args(["serve", "--port", "0", "--console-dir"])
        .arg(console)
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut err = BufReader::new(child.stderr.take().unwrap());
    let mut line = String::new();
    err.read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on http://").unwrap_or_else(|| panic!("unexpected: {line}")).to_string();
    (Server(child), addr)
}

#[test]
fn serve_answers_over_tcp() {
    let sb = Sandbox::new();
    let id = sb.process();
    let console = sb.path("console");
    std::fs::create_dir_all(&console).unwrap();
    std::fs::write(console.join("index.html"), "<title>console</title>").unwrap();
    let (_server, addr) = serve(&sb, &console);

    let (status, body) = http_get(&addr, "/console/");
    assert_eq!((status, body.as_str()), (200, "<title>console</title>"));
    let (status, body) = http_get(&addr, &format!("/v1/jobs/{id}"));
    assert_eq!(status, 200);
    assert!(body.contains("\"stage\":\"done\""));
    let (status, body) = http_get(&addr, &format!("/v1/jobs/{id}/script"));
    assert_eq!(status, 200);
    assert_eq!(body.as_bytes(), std::fs::read(sb.path("out/script.json")).unwrap());
    let (status, body) = http_get(&addr, "/v1/jobs/job-nope");
    assert_eq!(status, 404);
    assert!(body.contains("\"code\":\"UnknownJob\""));
}
