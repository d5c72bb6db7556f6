//! Single-file transactional store.
//!
//! The file is newline-delimited JSON, one transaction per line:
//!
//! ```text
//! {"txn":1,"records":[{"type":"job",...},{"type":"artifact",...}]}
//! ```
//!
//! A transaction is durable once its line, including the newline, is on
//! disk. A torn final line left by a crash is discarded on open. State is
//! rebuilt by replaying every transaction in order: later job records
//! replace earlier ones, artifacts are write-once.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use super::{Job, Stage};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store unavailable: {0}")]
    Unavailable(String),
    #[error("store file is corrupt at line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("artifact {kind:?}/{key} of job {job_id} already exists with different content")]
    ArtifactConflict { job_id: String, kind: ArtifactKind, key: String },
    #[error("unsupported schema version {0}")]
    SchemaVersion(u32),
}

impl StoreError {
    pub fn code(&self) -> &'static str {
        match self {
            StoreError::Unavailable(_) => "StoreUnavailable",
            StoreError::Corrupt { .. } => "StoreCorrupt",
            StoreError::ArtifactConflict { .. } => "ArtifactConflict",
            StoreError::SchemaVersion(_) => "SchemaVersion",
        }
    }
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::Unavailable(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    MediaInfo,
    ClipManifest,
    Transcript,
    Descriptions,
    Script,
    AdTrack,
    QaLog,
    EpisodeLog,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub job_id: String,
    pub kind: ArtifactKind,
    /// Distinguishes several artifacts of one kind (e.g. per-clip cache
    /// entries); the main artifact of a kind uses [`MAIN_KEY`].
    pub key: String,
    /// The artifact's canonical JSON, kept as text so reads are
    /// byte-identical to what was written.
    pub payload: String,
    pub schema_version: u32,
}

pub const MAIN_KEY: &str = "main";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageAudit {
    pub job_id: String,
    pub stage: Stage,
    pub at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum Record {
    Job(Job),
    Artifact(Artifact),
    Stage(StageAudit),
}

#[derive(Serialize, Deserialize)]
struct TxnLine {
    txn: u64,
    records: Vec<Record>,
}

type ArtifactKey = (String, ArtifactKind, String);

#[derive(Default)]
struct State {
    jobs: BTreeMap<String, Job>,
    artifacts: BTreeMap<ArtifactKey, Artifact>,
    audit: Vec<StageAudit>,
    next_txn: u64,
}

impl State {
    fn apply(&mut self, records: &[Record]) {
        for r in records {
            match r {
                Record::Job(j) => {
                    self.jobs.insert(j.job_id.clone(), j.clone());
                }
                Record::Artifact(a) => {
                    self.artifacts.entry((a.job_id.clone(), a.kind, a.key.clone())).or_insert_with(|| a.clone());
                }
                Record::Stage(s) => self.audit.push(s.clone()),
            }
        }
    }
}

pub struct Store {
    path: PathBuf,
    inner: Mutex<(File, State)>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("path", &self.path).finish()
    }
}

impl Store {
    /// Opens or creates the store file and replays it.
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(path)?;
        let mut state = State::default();
        let mut good_len = 0u64;
        let mut torn = false;
        {
            let mut reader = BufReader::new(&mut file);
            reader.seek(SeekFrom::Start(0))?;
            let mut line_no = 0;
            let mut buf = String::new();
            loop {
                buf.clear();
                let n = reader.read_line(&mut buf)?;
                if n == 0 {
                    break;
                }
                line_no += 1;
                let complete = buf.ends_with('\n');
                match serde_json::from_str::<TxnLine>(buf.trim_end()) {
                    Ok(txn) if complete => {
                        for r in &txn.records {
                            if let Record::Artifact(a) = r {
                                if a.schema_version > SCHEMA_VERSION {
                                    return Err(StoreError::SchemaVersion(a.schema_version));
                                }
                            }
                        }
                        state.apply(&txn.records);
                        state.next_txn = state.next_txn.max(txn.txn + 1);
                        good_len += n as u64;
                    }
                    Ok(_) | Err(_) => {
                        let mut rest = String::new();
                        reader.read_line(&mut rest)?;
                        if complete && !rest.is_empty() {
                            return Err(StoreError::Corrupt { line: line_no, message: "unreadable transaction".into() });
                        }
                        torn = true;
                        break;
                    }
                }
            }
        }
        if torn {
            warn!(path = %path.display(), "discarding torn final transaction");
            file.set_len(good_len)?;
        }
        state.next_txn = state.next_txn.max(1);
        Ok(Self { path: path.to_path_buf(), inner: Mutex::new((file, state)) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn lock(&self) -> Result<std::sync::MutexGuard<'_, (File, State)>, StoreError> {
        self.inner.lock().map_err(|_| StoreError::Unavailable("store lock poisoned".into()))
    }

    /// Writes all records as one transaction. Artifacts that already
    /// exist with identical content are skipped; different content is a
    /// conflict and nothing is written.
    pub fn commit(&self, records: Vec<Record>) -> Result<(), StoreError> {
        let mut guard = self.lock()?;
        let (file, state) = &mut *guard;
        let mut fresh = Vec::with_capacity(records.len());
        for r in records {
            if let Record::Artifact(a) = &r {
                if let Some(existing) = state.artifacts.get(&(a.job_id.clone(), a.kind, a.key.clone())) {
                    if existing.payload == a.payload {
                        continue;
                    }
                    return Err(StoreError::ArtifactConflict { job_id: a.job_id.clone(), kind: a.kind, key: a.key.clone() });
                }
            }
            fresh.push(r);
        }
        if fresh.is_empty() {
            return Ok(());
        }
        let txn = TxnLine { txn: state.next_txn, records: fresh };
        let mut line = serde_json::to_string(&txn).map_err(|e| StoreError::Unavailable(e.to_string()))?;
        line.push('\n');
        file.write_all(line.as_bytes())?;
        file.sync_data()?;
        state.next_txn += 1;
        state.apply(&txn.records);
        Ok(())
    }

    pub fn job(&self, job_id: &str) -> Result<Option<Job>, StoreError> {
        Ok(self.lock()?.1.jobs.get(job_id).cloned())
    }

    pub fn jobs(&self) -> Result<Vec<Job>, StoreError> {
        Ok(self.lock()?.1.jobs.values().cloned().collect())
    }

    pub fn artifact(&self, job_id: &str, kind: ArtifactKind, key: &str) -> Result<Option<Artifact>, StoreError> {
        Ok(self.lock()?.1.artifacts.get(&(job_id.to_string(), kind, key.to_string())).cloned())
    }

    /// All artifacts of one kind for a job, ordered by key.
    pub fn artifacts(&self, job_id: &str, kind: ArtifactKind) -> Result<Vec<Artifact>, StoreError> {
        Ok(self
            .lock()?
            .1
            .artifacts
            .values()
            .filter(|a| a.job_id == job_id && a.kind == kind)
            .cloned()
            .collect())
    }

    /// Stage transitions recorded for a job, oldest first.
    pub fn stage_history(&self, job_id: &str) -> Result<Vec<Stage>, StoreError> {
        Ok(self.lock()?.1.audit.iter().filter(|a| a.job_id == job_id).map(|a| a.stage).collect())
    }
}
