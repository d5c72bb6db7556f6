//! Fixture files: newline-delimited JSON records
//! `{fingerprint, kind, response, recorded_at}`, in the order they were
//! recorded. Hand-written fixtures only need the same four fields.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{
    AsrBackend, AsrRequest, AsrResponse, BackendError, BackendKind, CallLog, LmmRequest, LmmResponse, ModelBackend,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub fingerprint: String,
    pub kind: BackendKind,
    pub response: serde_json::Value,
    pub recorded_at: String,
}

#[derive(Debug)]
pub struct FixtureFile {
    path: PathBuf,
    records: Mutex<Vec<FixtureRecord>>,
}

impl FixtureFile {
    pub fn open(path: &Path) -> Result<Self, BackendError> {
        let mut records = Vec::new();
        match std::fs::File::open(path) {
            Ok(f) => {
                for (i, line) in BufReader::new(f).lines().enumerate() {
                    let line = line.map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let rec: FixtureRecord = serde_json::from_str(&line).map_err(|e| {
                        BackendError::Config(format!("{} line {}: {e}", path.display(), i + 1))
                    })?;
                    records.push(rec);
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(BackendError::Config(format!("{}: {e}", path.display()))),
        }
        Ok(Self { path: path.to_path_buf(), records: Mutex::new(records) })
    }

    fn lock(&self) -> MutexGuard<'_, Vec<FixtureRecord>> {
        self.records.lock().expect("fixture lock poisoned")
    }

    pub fn records(&self) -> Vec<FixtureRecord> {
        self.lock().clone()
    }

    pub fn lookup(&self, fingerprint: &str) -> Option<FixtureRecord> {
        self.lock().iter().find(|r| r.fingerprint == fingerprint).cloned()
    }

    /// Appends a record. Re-recording an identical payload is a no-op; a
    /// different payload under an existing fingerprint is a conflict.
    pub fn record(
        &self,
        kind: BackendKind,
        fingerprint: &str,
        response: serde_json::Value,
    ) -> Result<FixtureRecord, BackendError> {
        let mut records = self.lock();
        if let Some(existing) = records.iter().find(|r| r.fingerprint == fingerprint) {
            if existing.response == response && existing.kind == kind {
                return Ok(existing.clone());
            }
            return Err(BackendError::FixtureConflict(fingerprint.to_string()));
        }
        let rec = FixtureRecord {
            fingerprint: fingerprint.to_string(),
            kind,
            response,
            recorded_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        };
        let line = serde_json::to_string(&rec).map_err(|e| BackendError::FixtureWriteFailed(e.to_string()))?;
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| BackendError::FixtureWriteFailed(format!("{}: {e}", self.path.display())))?;
        writeln!(f, "{line}").map_err(|e| BackendError::FixtureWriteFailed(e.to_string()))?;
        records.push(rec.clone());
        Ok(rec)
    }
}

/// Passes calls through to a live backend and captures every response into
/// a fixture file, so the session can later be replayed by [`super::MockBackend`].
pub struct RecordingBackend<B> {
    inner: B,
    kind: BackendKind,
    fixtures: FixtureFile,
    log: CallLog,
}

impl<B: ModelBackend> RecordingBackend<B> {
    pub fn new(inner: B, kind: BackendKind, fixture_path: &Path) -> Result<Self, BackendError> {
        Ok(Self { inner, kind, fixtures: FixtureFile::open(fixture_path)?, log: CallLog::default() })
    }

    pub fn fixtures(&self) -> &FixtureFile {
        &self.fixtures
    }
}

impl<B: ModelBackend> ModelBackend for RecordingBackend<B> {
    fn id(&self) -> String {
        format!("record:{}", self.inner.id())
    }

    fn complete(&self, request: &LmmRequest) -> Result<LmmResponse, BackendError> {
        let started = Instant::now();
        let fp = request.fingerprint();
        let resp = self.inner.complete(request)?;
        let payload = serde_json::to_value(&resp).expect("response serializes");
        self.fixtures.record(self.kind, &fp, payload)?;
        self.log.record(&self.id(), Some(request.task), &fp, started, "recorded");
        Ok(resp)
    }
}

pub struct RecordingAsrBackend<B> {
    inner: B,
    fixtures: FixtureFile,
}

impl<B: AsrBackend> RecordingAsrBackend<B> {
    pub fn new(inner: B, fixture_path: &Path) -> Result<Self, BackendError> {
        Ok(Self { inner, fixtures: FixtureFile::open(fixture_path)? })
    }
}

impl<B: AsrBackend> AsrBackend for RecordingAsrBackend<B> {
    fn id(&self) -> String {
        format!("record:{}", self.inner.id())
    }

    fn transcribe(&self, request: &AsrRequest) -> Result<AsrResponse, BackendError> {
        let resp = self.inner.transcribe(request)?;
        let payload = serde_json::to_value(&resp).expect("response serializes");
        self.fixtures.record(BackendKind::Asr, &request.fingerprint(), payload)?;
        Ok(resp)
    }
}
