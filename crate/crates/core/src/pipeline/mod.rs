//! The end-to-end job: probe, segment, transcribe, describe, synthesize,
//! refine. Each call to [`Pipeline::advance`] runs one stage, persists its
//! artifact, and only then moves the job's stage pointer, so a crash at
//! any point resumes without redoing finished work.

mod store;

use std::collections::{BTreeMap, HashMap};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::{info, warn};

use crate::backends::{AsrBackend, MockAsrBackend, MockBackend, ModelBackend};
use crate::describe::{describe_all, ClipDescription, DescribeHooks, DescribeOptions, DescribeReport, MediaAsset};
use crate::knowledge::KnowledgePack;
use crate::media::{Decoder, MediaInfo};
use crate::qa::{self, CorpusEntry, GroundedAnswer, Moment, QaExchange, ScriptCorpus};
use crate::scene::{clips_from_boundaries, Clip, SceneBoundary, SceneDetector, SegmentationConfig};
use crate::script::{
    export_webvtt, generate_ad, refine, schedule_ad, summarize, synthesize, AdCue, AdReport, Script, SynthesisOptions,
    DEFAULT_AD_WPM, DEFAULT_CHUNK_BUDGET_TOKENS,
};
use crate::transcript::{align_to_clips, attribute_speakers, file_sha256, transcribe, Transcript};

pub use store::{Artifact, ArtifactKind, Record, StageAudit, Store, StoreError, MAIN_KEY, SCHEMA_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Queued,
    Probing,
    Segmenting,
    Transcribing,
    Describing,
    Synthesizing,
    Refining,
    Done,
    Failed,
}

impl Stage {
    pub const ORDER: [Stage; 8] = [
        Stage::Queued,
        Stage::Probing,
        Stage::Segmenting,
        Stage::Transcribing,
        Stage::Describing,
        Stage::Synthesizing,
        Stage::Refining,
        Stage::Done,
    ];

    pub fn next(self) -> Option<Stage> {
        let i = Self::ORDER.iter().position(|s| *s == self)?;
        Self::ORDER.get(i + 1).copied()
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, Stage::Done | Stage::Failed)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Queued => "queued",
            Stage::Probing => "probing",
            Stage::Segmenting => "segmenting",
            Stage::Transcribing => "transcribing",
            Stage::Describing => "describing",
            Stage::Synthesizing => "synthesizing",
            Stage::Refining => "refining",
            Stage::Done => "done",
            Stage::Failed => "failed",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// True when `history` walks the canonical order from the start, with at
/// most one terminal state at the end.
pub fn is_valid_stage_history(history: &[Stage]) -> bool {
    for (i, s) in history.iter().enumerate() {
        if *s == Stage::Failed {
            return i + 1 == history.len() && i > 0;
        }
        if Stage::ORDER.get(i) != Some(s) {
            return false;
        }
    }
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobConfig {
    pub segmentation: SegmentationConfig,
    pub frames_per_clip: usize,
    pub refine_passes: u32,
    pub ad: bool,
    pub ad_wpm: f64,
    pub chunk_budget_tokens: usize,
    pub describe_parallelism: usize,
    pub language_hint: Option<String>,
}

impl Default for JobConfig {
    fn default() -> Self {
        Self {
            segmentation: SegmentationConfig::default(),
            frames_per_clip: crate::describe::DEFAULT_FRAMES_PER_CLIP,
            refine_passes: 1,
            ad: false,
            ad_wpm: DEFAULT_AD_WPM,
            chunk_budget_tokens: DEFAULT_CHUNK_BUDGET_TOKENS,
            describe_parallelism: 4,
            language_hint: None,
        }
    }
}

impl JobConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.segmentation.validate().map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
        if self.frames_per_clip == 0 {
            return Err(PipelineError::InvalidConfig("frames_per_clip must be at least 1".into()));
        }
        if !(self.ad_wpm > 0.0) {
            return Err(PipelineError::InvalidConfig("ad_wpm must be positive".into()));
        }
        if self.chunk_budget_tokens == 0 || self.describe_parallelism == 0 {
            return Err(PipelineError::InvalidConfig("chunk budget and parallelism must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobError {
    pub code: String,
    pub message: String,
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: String,
    pub video_path: PathBuf,
    pub pack: KnowledgePack,
    pub config: JobConfig,
    pub stage: Stage,
    pub progress: f64,
    pub error: Option<JobError>,
    pub created_at: String,
    pub updated_at: String,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("job {job_id} is {stage}, not done")]
    JobNotDone { job_id: String, stage: Stage },
    #[error("job {job_id} already finished as {stage}")]
    JobTerminal { job_id: String, stage: Stage },
    #[error("job {job_id} has no {kind:?} artifact")]
    ArtifactMissing { job_id: String, kind: ArtifactKind },
    #[error("injected crash at {0}")]
    InjectedCrash(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Qa(#[from] qa::QaError),
    /// A stage-level failure from one of the processing modules.
    #[error("{code}: {message}")]
    Module { code: String, message: String },
}

impl PipelineError {
    pub fn code(&self) -> &str {
        match self {
            PipelineError::FileNotFound(_) => "FileNotFound",
            PipelineError::Store(e) => e.code(),
            PipelineError::UnknownJob(_) => "UnknownJob",
            PipelineError::JobNotDone { .. } => "JobNotDone",
            PipelineError::JobTerminal { .. } => "JobTerminal",
            PipelineError::ArtifactMissing { .. } => "ArtifactMissing",
            PipelineError::InjectedCrash(_) => "InjectedCrash",
            PipelineError::InvalidConfig(_) => "InvalidConfig",
            PipelineError::Qa(e) => e.code(),
            PipelineError::Module { code, .. } => code,
        }
    }

    fn module(code: &str, e: impl std::fmt::Display) -> Self {
        PipelineError::Module { code: code.to_string(), message: e.to_string() }
    }
}

macro_rules! module_err {
    ($e:expr) => {{
        let e = $e;
        PipelineError::module(e.code(), &e)
    }};
}

/// Where a simulated crash happens. Each point fires once.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KillPoint {
    /// The stage's work is done but its artifact is not yet persisted.
    BeforePersist(Stage),
    /// The artifact is persisted but the stage pointer has not moved.
    AfterPersist(Stage),
    /// While describing, after this many clips were newly described.
    AfterClips(usize),
}

impl std::fmt::Display for KillPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KillPoint::BeforePersist(s) => write!(f, "before persisting {s}"),
            KillPoint::AfterPersist(s) => write!(f, "after persisting {s}"),
            KillPoint::AfterClips(n) => write!(f, "after describing {n} clips"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum PipelineEvent {
    StageChanged { job_id: String, stage: Stage, progress: f64 },
    ClipDescribed { job_id: String, clip_id: usize, from_cache: bool, completed: usize, total: usize },
    JobFailed { job_id: String, error: JobError },
}

impl PipelineEvent {
    pub fn job_id(&self) -> &str {
        match self {
            PipelineEvent::StageChanged { job_id, .. }
            | PipelineEvent::ClipDescribed { job_id, .. }
            | PipelineEvent::JobFailed { job_id, .. } => job_id,
        }
    }
}

pub trait EventSink: Send + Sync {
    fn emit(&self, event: &PipelineEvent);
}

pub struct NullSink;
impl EventSink for NullSink {
    fn emit(&self, _event: &PipelineEvent) {}
}

/// The three model services the pipeline talks to.
#[derive(Clone)]
pub struct Backends {
    /// Vision-language model for clip descriptions.
    pub lmm: Arc<dyn ModelBackend>,
    /// Text model for speaker attribution, synthesis, refinement, QA, AD.
    pub llm: Arc<dyn ModelBackend>,
    pub asr: Arc<dyn AsrBackend>,
}

impl Backends {
    pub fn mock() -> Self {
        Self {
            lmm: Arc::new(MockBackend::new("mock-lmm")),
            llm: Arc::new(MockBackend::new("mock-llm")),
            asr: Arc::new(MockAsrBackend::new("mock-asr")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipManifest {
    pub boundaries: Vec<SceneBoundary>,
    pub clips: Vec<Clip>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionsArtifact {
    pub report: DescribeReport,
    /// The transcript with speakers attributed from the descriptions.
    pub transcript: Transcript,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdTrack {
    pub cues: Vec<AdCue>,
    pub report: AdReport,
    pub vtt: String,
}

const DRAFT_KEY: &str = "draft";
const CLIP_KEY_PREFIX: &str = "clip/";

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn to_payload<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("artifacts serialize")
}

fn artifact_record<T: Serialize>(job_id: &str, kind: ArtifactKind, key: &str, value: &T) -> Record {
    Record::Artifact(Artifact {
        job_id: job_id.to_string(),
        kind,
        key: key.to_string(),
        payload: to_payload(value),
        schema_version: SCHEMA_VERSION,
    })
}

/// Content key of a submission: the file bytes, the pack and the config.
pub fn job_id_for(path: &Path, pack: &KnowledgePack, config: &JobConfig) -> std::io::Result<String> {
    let file_hash = file_sha256(path)?;
    let mut h = Sha256::new();
    h.update(file_hash.as_bytes());
    h.update(b"\n");
    h.update(to_payload(pack).as_bytes());
    h.update(b"\n");
    h.update(to_payload(config).as_bytes());
    Ok(format!("job-{}", &hex::encode(h.finalize())[..16]))
}

pub struct Pipeline {
    store: Arc<Store>,
    decoder: Arc<dyn Decoder>,
    backends: Backends,
    sink: Arc<dyn EventSink>,
    kill: Mutex<Option<KillPoint>>,
    live_progress: Mutex<HashMap<String, f64>>,
}

impl Pipeline {
    pub fn new(store: Arc<Store>, decoder: Arc<dyn Decoder>, backends: Backends) -> Self {
        Self {
            store,
            decoder,
            backends,
            sink: Arc::new(NullSink),
            kill: Mutex::new(None),
            live_progress: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_sink(mut self, sink: Arc<dyn EventSink>) -> Self {
        self.sink = sink;
        self
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn backends(&self) -> &Backends {
        &self.backends
    }

    /// Arms a simulated crash for fault-injection tests.
    pub fn inject_crash(&self, point: KillPoint) {
        *self.kill.lock().expect("kill lock") = Some(point);
    }

    fn check_kill(&self, point: KillPoint) -> Result<(), PipelineError> {
        let mut armed = self.kill.lock().expect("kill lock");
        if *armed == Some(point) {
            *armed = None;
            return Err(PipelineError::InjectedCrash(point.to_string()));
        }
        Ok(())
    }

    fn kill_after_clips(&self) -> Option<usize> {
        match *self.kill.lock().expect("kill lock") {
            Some(KillPoint::AfterClips(n)) => Some(n),
            _ => None,
        }
    }

    /// Registers a job for the file, or returns the existing id when the
    /// same content was submitted before.
    pub fn submit_job(&self, path: &Path, pack: KnowledgePack, config: JobConfig) -> Result<String, PipelineError> {
        if !path.is_file() {
            return Err(PipelineError::FileNotFound(path.to_path_buf()));
        }
        pack.validate().map_err(|e| module_err!(e))?;
        config.validate()?;
        let job_id = job_id_for(path, &pack, &config).map_err(|e| PipelineError::module("IoError", e))?;
        if self.store.job(&job_id)?.is_some() {
            return Ok(job_id);
        }
        let video_path = path.canonicalize().map_err(|e| PipelineError::module("IoError", e))?;
        let t = now();
        let job = Job {
            job_id: job_id.clone(),
            video_path,
            pack,
            config,
            stage: Stage::Queued,
            progress: 0.0,
            error: None,
            created_at: t.clone(),
            updated_at: t.clone(),
        };
        self.store.commit(vec![
            Record::Job(job),
            Record::Stage(StageAudit { job_id: job_id.clone(), stage: Stage::Queued, at: t }),
        ])?;
        info!(%job_id, "job submitted");
        Ok(job_id)
    }

    /// The job as stored, with live progress while it is describing.
    pub fn job(&self, job_id: &str) -> Result<Job, PipelineError> {
        let mut job = self.store.job(job_id)?.ok_or_else(|| PipelineError::UnknownJob(job_id.to_string()))?;
        if job.stage == Stage::Describing {
            if let Some(p) = self.live_progress.lock().expect("progress lock").get(job_id) {
                job.progress = *p;
            }
        }
        Ok(job)
    }

    fn load<T: DeserializeOwned>(&self, job_id: &str, kind: ArtifactKind, key: &str) -> Result<Option<T>, PipelineError> {
        match self.store.artifact(job_id, kind, key)? {
            None => Ok(None),
            Some(a) => serde_json::from_str(&a.payload)
                .map(Some)
                .map_err(|e| PipelineError::module("StoreCorrupt", format!("{kind:?}/{key}: {e}"))),
        }
    }

    fn require<T: DeserializeOwned>(&self, job_id: &str, kind: ArtifactKind, key: &str) -> Result<T, PipelineError> {
        self.load(job_id, kind, key)?
            .ok_or_else(|| PipelineError::ArtifactMissing { job_id: job_id.to_string(), kind })
    }

    /// Persists the stage's artifacts unless they already exist, with the
    /// before/after kill points around the write.
    fn persist(&self, stage: Stage, records: Vec<Record>) -> Result<(), PipelineError> {
        self.check_kill(KillPoint::BeforePersist(stage))?;
        self.store.commit(records)?;
        Ok(())
    }

    fn has(&self, job_id: &str, kind: ArtifactKind, key: &str) -> Result<bool, PipelineError> {
        Ok(self.store.artifact(job_id, kind, key)?.is_some())
    }

    /// Runs exactly one stage of a non-terminal job.
    pub fn advance(&self, job_id: &str) -> Result<Job, PipelineError> {
        let mut job = self.job(job_id)?;
        if job.stage.is_terminal() {
            return Err(PipelineError::JobTerminal { job_id: job.job_id, stage: job.stage });
        }
        let stage = job.stage;
        match self.run_stage(&job) {
            Ok(()) => {}
            Err(e @ (PipelineError::InjectedCrash(_) | PipelineError::Store(_))) => return Err(e),
            Err(e) => {
                warn!(%job_id, %stage, error = %e, "stage failed");
                let error = JobError { code: e.code().to_string(), message: e.to_string(), stage, detail: None };
                job.stage = Stage::Failed;
                job.error = Some(error.clone());
                job.updated_at = now();
                self.store.commit(vec![
                    Record::Job(job.clone()),
                    Record::Stage(StageAudit { job_id: job_id.to_string(), stage: Stage::Failed, at: job.updated_at.clone() }),
                ])?;
                self.sink.emit(&PipelineEvent::JobFailed { job_id: job_id.to_string(), error });
                return Ok(job);
            }
        }
        if stage != Stage::Queued {
            self.check_kill(KillPoint::AfterPersist(stage))?;
        }
        let next = stage.next().expect("non-terminal stage has a successor");
        job.stage = next;
        job.progress = if next > Stage::Describing { 1.0 } else { 0.0 };
        job.updated_at = now();
        self.store.commit(vec![
            Record::Job(job.clone()),
            Record::Stage(StageAudit { job_id: job_id.to_string(), stage: next, at: job.updated_at.clone() }),
        ])?;
        self.live_progress.lock().expect("progress lock").remove(job_id);
        self.sink.emit(&PipelineEvent::StageChanged { job_id: job_id.to_string(), stage: next, progress: job.progress });
        Ok(job)
    }

    /// Advances until the job is done or failed.
    pub fn run_to_completion(&self, job_id: &str) -> Result<Job, PipelineError> {
        let mut job = self.job(job_id)?;
        while !job.stage.is_terminal() {
            job = self.advance(job_id)?;
        }
        Ok(job)
    }

    fn run_stage(&self, job: &Job) -> Result<(), PipelineError> {
        let id = job.job_id.as_str();
        let path = job.video_path.as_path();
        match job.stage {
            Stage::Queued => Ok(()),
            Stage::Probing => {
                if self.has(id, ArtifactKind::MediaInfo, MAIN_KEY)? {
                    return Ok(());
                }
                if !path.is_file() {
                    return Err(PipelineError::FileNotFound(path.to_path_buf()));
                }
                let info = self.decoder.probe(path).map_err(|e| module_err!(e))?;
                self.persist(Stage::Probing, vec![artifact_record(id, ArtifactKind::MediaInfo, MAIN_KEY, &info)])
            }
            Stage::Segmenting => {
                if self.has(id, ArtifactKind::ClipManifest, MAIN_KEY)? {
                    return Ok(());
                }
                let info: MediaInfo = self.require(id, ArtifactKind::MediaInfo, MAIN_KEY)?;
                let cfg = job.config.segmentation;
                let mut det = SceneDetector::new(cfg).map_err(|e| module_err!(e))?;
                for frame in self.decoder.analysis_frames(path, &info, cfg.analysis_fps, cfg.downscale_edge_px) {
                    det.push(&frame.map_err(|e| module_err!(e))?).map_err(|e| module_err!(e))?;
                }
                let boundaries = det.finish().map_err(|e| module_err!(e))?;
                let cuts: Vec<f64> = boundaries.iter().map(|b| b.timestamp_s).collect();
                let clips = clips_from_boundaries(&cuts, info.duration_s, &cfg).map_err(|e| module_err!(e))?;
                let manifest = ClipManifest { boundaries, clips };
                self.persist(Stage::Segmenting, vec![artifact_record(id, ArtifactKind::ClipManifest, MAIN_KEY, &manifest)])
            }
            Stage::Transcribing => {
                if self.has(id, ArtifactKind::Transcript, MAIN_KEY)? {
                    return Ok(());
                }
                let info: MediaInfo = self.require(id, ArtifactKind::MediaInfo, MAIN_KEY)?;
                let t = transcribe(path, &info, self.backends.asr.as_ref(), job.config.language_hint.as_deref())
                    .map_err(|e| module_err!(e))?;
                self.persist(Stage::Transcribing, vec![artifact_record(id, ArtifactKind::Transcript, MAIN_KEY, &t)])
            }
            Stage::Describing => {
                if self.has(id, ArtifactKind::Descriptions, MAIN_KEY)? {
                    return Ok(());
                }
                let artifact = self.describe_stage(job)?;
                self.persist(Stage::Describing, vec![artifact_record(id, ArtifactKind::Descriptions, MAIN_KEY, &artifact)])
            }
            Stage::Synthesizing => {
                if self.has(id, ArtifactKind::Script, DRAFT_KEY)? {
                    return Ok(());
                }
                let d: DescriptionsArtifact = self.require(id, ArtifactKind::Descriptions, MAIN_KEY)?;
                let mut opts = SynthesisOptions::new(id);
                opts.chunk_budget_tokens = job.config.chunk_budget_tokens;
                let script = synthesize(&d.report.descriptions, &d.transcript, &job.pack, self.backends.llm.as_ref(), &opts)
                    .map_err(|e| module_err!(e))?;
                self.persist(Stage::Synthesizing, vec![artifact_record(id, ArtifactKind::Script, DRAFT_KEY, &script)])
            }
            Stage::Refining => {
                if self.has(id, ArtifactKind::Script, MAIN_KEY)? {
                    return Ok(());
                }
                let records = self.refine_stage(job)?;
                self.persist(Stage::Refining, records)
            }
            Stage::Done | Stage::Failed => unreachable!("terminal stages are not run"),
        }
    }

    fn describe_stage(&self, job: &Job) -> Result<DescriptionsArtifact, PipelineError> {
        let id = job.job_id.as_str();
        let info: MediaInfo = self.require(id, ArtifactKind::MediaInfo, MAIN_KEY)?;
        let manifest: ClipManifest = self.require(id, ArtifactKind::ClipManifest, MAIN_KEY)?;
        let transcript: Transcript = self.require(id, ArtifactKind::Transcript, MAIN_KEY)?;
        let aligned = align_to_clips(&transcript, &manifest.clips);
        let options = DescribeOptions {
            parallelism: job.config.describe_parallelism,
            frames_per_clip: job.config.frames_per_clip,
            ..DescribeOptions::default()
        };
        let hooks = StoreHooks {
            pipeline: self,
            job_id: id,
            total: manifest.clips.len(),
            completed: AtomicUsize::new(0),
            fresh: AtomicUsize::new(0),
            kill_after: self.kill_after_clips(),
            killed: AtomicBool::new(false),
        };
        let asset = MediaAsset { path: &job.video_path, info: &info, decoder: self.decoder.as_ref() };
        let result = describe_all(&manifest.clips, &asset, &job.pack, &aligned, self.backends.lmm.as_ref(), &options, &hooks);
        if hooks.killed.load(Ordering::SeqCst) {
            self.check_kill(KillPoint::AfterClips(hooks.kill_after.unwrap_or_default()))?;
        }
        let report = result.map_err(|e| module_err!(e))?;
        let attributed = attribute_speakers(
            &transcript,
            &report.descriptions,
            &job.pack,
            self.backends.llm.as_ref(),
            job.config.describe_parallelism,
        )
        .map_err(|e| module_err!(e))?;
        Ok(DescriptionsArtifact { report, transcript: attributed })
    }

    fn refine_stage(&self, job: &Job) -> Result<Vec<Record>, PipelineError> {
        let id = job.job_id.as_str();
        let draft: Script = self.require(id, ArtifactKind::Script, DRAFT_KEY)?;
        let llm = self.backends.llm.as_ref();
        let mut script =
            summarize(&draft, &job.pack, llm, job.config.chunk_budget_tokens).map_err(|e| module_err!(e))?;
        for pass in 0..job.config.refine_passes {
            let outcome = refine(&script, llm).map_err(|e| module_err!(e))?;
            if outcome.is_rejected() {
                warn!(job_id = id, pass, "refinement pass rejected; keeping the previous revision");
                break;
            }
            script = outcome.into_script();
        }
        let mut records = vec![artifact_record(id, ArtifactKind::Script, MAIN_KEY, &script)];
        if job.config.ad {
            let d: DescriptionsArtifact = self.require(id, ArtifactKind::Descriptions, MAIN_KEY)?;
            let info: MediaInfo = self.require(id, ArtifactKind::MediaInfo, MAIN_KEY)?;
            let cues = generate_ad(&script, &d.transcript, llm, job.config.ad_wpm).map_err(|e| module_err!(e))?;
            let scheduled = schedule_ad(&cues, &d.transcript.speech_intervals(), info.duration_s);
            let report = AdReport::new(&cues, &scheduled);
            let vtt = export_webvtt(&scheduled);
            records.push(artifact_record(id, ArtifactKind::AdTrack, MAIN_KEY, &AdTrack { cues: scheduled, report, vtt }));
        }
        Ok(records)
    }

    fn done_job(&self, job_id: &str) -> Result<Job, PipelineError> {
        let job = self.job(job_id)?;
        if job.stage != Stage::Done {
            return Err(PipelineError::JobNotDone { job_id: job_id.to_string(), stage: job.stage });
        }
        Ok(job)
    }

    /// The stored script payload, byte for byte.
    pub fn script_payload(&self, job_id: &str) -> Result<String, PipelineError> {
        self.done_job(job_id)?;
        self.store
            .artifact(job_id, ArtifactKind::Script, MAIN_KEY)?
            .map(|a| a.payload)
            .ok_or_else(|| PipelineError::ArtifactMissing { job_id: job_id.to_string(), kind: ArtifactKind::Script })
    }

    pub fn get_script(&self, job_id: &str) -> Result<Script, PipelineError> {
        self.done_job(job_id)?;
        self.require(job_id, ArtifactKind::Script, MAIN_KEY)
    }

    pub fn descriptions(&self, job_id: &str) -> Result<DescriptionsArtifact, PipelineError> {
        self.require(job_id, ArtifactKind::Descriptions, MAIN_KEY)
    }

    /// A corpus of the jobs' scripts, labelled by their pack titles.
    pub fn corpus(&self, job_ids: &[String]) -> Result<ScriptCorpus, PipelineError> {
        let mut entries = Vec::with_capacity(job_ids.len());
        for id in job_ids {
            let job = self.done_job(id)?;
            let label = job.pack.title.clone().filter(|t| !t.trim().is_empty()).unwrap_or_else(|| id.clone());
            entries.push(CorpusEntry { video_id: id.clone(), label, script: self.get_script(id)? });
        }
        Ok(ScriptCorpus::new(entries)?)
    }

    /// Answers over the jobs' scripts and appends the exchange to the
    /// first job's QA log.
    pub fn qa(&self, job_ids: &[String], question: &str) -> Result<GroundedAnswer, PipelineError> {
        if job_ids.is_empty() {
            return Err(qa::QaError::EmptyCorpus.into());
        }
        let corpus = self.corpus(job_ids)?;
        let answer = qa::answer(&corpus, question, self.backends.llm.as_ref())?;
        let exchange = QaExchange::new(question, &answer, &self.backends.llm.id());
        let n = self.store.artifacts(&job_ids[0], ArtifactKind::QaLog)?.len();
        let key = format!("{n:08}");
        self.store.commit(vec![artifact_record(&job_ids[0], ArtifactKind::QaLog, &key, &exchange)])?;
        Ok(answer)
    }

    pub fn locate(&self, job_id: &str, query: &str, k: usize) -> Result<Vec<Moment>, PipelineError> {
        let corpus = self.corpus(&[job_id.to_string()])?;
        Ok(qa::locate(&corpus, query, self.backends.llm.as_ref(), k)?)
    }

    pub fn ad_track(&self, job_id: &str) -> Result<AdTrack, PipelineError> {
        self.done_job(job_id)?;
        self.require(job_id, ArtifactKind::AdTrack, MAIN_KEY)
    }

    /// WebVTT bytes of the job's audio-description track.
    pub fn export_ad(&self, job_id: &str) -> Result<String, PipelineError> {
        Ok(self.ad_track(job_id)?.vtt)
    }
}

/// Serves per-clip descriptions from the store and persists new ones as
/// they complete, so an interrupted describing stage never pays twice.
struct StoreHooks<'a> {
    pipeline: &'a Pipeline,
    job_id: &'a str,
    total: usize,
    completed: AtomicUsize,
    fresh: AtomicUsize,
    kill_after: Option<usize>,
    killed: AtomicBool,
}

impl DescribeHooks for StoreHooks<'_> {
    fn cached(&self, clip: &Clip, fingerprint: &str) -> Option<ClipDescription> {
        let key = format!("{CLIP_KEY_PREFIX}{fingerprint}");
        match self.pipeline.load::<ClipDescription>(self.job_id, ArtifactKind::Descriptions, &key) {
            Ok(Some(d)) if d.clip_id == clip.clip_id => Some(d),
            Ok(_) => None,
            Err(e) => {
                warn!(error = %e, "ignoring unreadable cached description");
                None
            }
        }
    }

    fn completed(&self, description: &ClipDescription, from_cache: bool) -> ControlFlow<()> {
        if !from_cache && !description.placeholder {
            let key = format!("{CLIP_KEY_PREFIX}{}", description.prompt_fingerprint);
            let rec = artifact_record(self.job_id, ArtifactKind::Descriptions, &key, description);
            if let Err(e) = self.pipeline.store.commit(vec![rec]) {
                warn!(error = %e, clip = description.clip_id, "could not cache clip description");
            }
        }
        let done = self.completed.fetch_add(1, Ordering::SeqCst) + 1;
        let progress = done as f64 / self.total as f64;
        self.pipeline.live_progress.lock().expect("progress lock").insert(self.job_id.to_string(), progress);
        self.pipeline.sink.emit(&PipelineEvent::ClipDescribed {
            job_id: self.job_id.to_string(),
            clip_id: description.clip_id,
            from_cache,
            completed: done,
            total: self.total,
        });
        if !from_cache {
            let fresh = self.fresh.fetch_add(1, Ordering::SeqCst) + 1;
            if self.kill_after == Some(fresh) {
                self.killed.store(true, Ordering::SeqCst);
                return ControlFlow::Break(());
            }
        }
        ControlFlow::Continue(())
    }
}

/// Summary counts of a job's artifacts, for status displays.
pub fn artifact_counts(store: &Store, job_id: &str) -> Result<BTreeMap<ArtifactKind, usize>, StoreError> {
    let mut out = BTreeMap::new();
    for kind in [
        ArtifactKind::MediaInfo,
        ArtifactKind::ClipManifest,
        ArtifactKind::Transcript,
        ArtifactKind::Descriptions,
        ArtifactKind::Script,
        ArtifactKind::AdTrack,
        ArtifactKind::QaLog,
        ArtifactKind::EpisodeLog,
    ] {
        let n = store.artifacts(job_id, kind)?.len();
        if n > 0 {
            out.insert(kind, n);
        }
    }
    Ok(out)
}
