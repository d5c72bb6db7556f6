//! Agent episodes run by the service, with optional operator steering.
//!
//! Every episode publishes to topic `agent/<id>`: `episode_started`, a
//! `proposal` before each step when interactive, `step` after it, and
//! finally `episode_finished` or `episode_failed`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use vidscript_core::agent::{
    run_episode, AgentError, Environment, EpisodeHooks, GridGame, GuiScript, Steering, StepRecord,
};
use vidscript_core::{AgentAction, EnvironmentSpec, ModelBackend};

use crate::hub::Hub;

pub const GRID_OBSTACLE_RATE: f64 = 0.35;
pub const DEFAULT_GRID_WIDTH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    Grid,
    GuiScript,
}

pub fn make_environment(kind: EnvKind, seed: u64, width: usize) -> Box<dyn Environment> {
    match kind {
        EnvKind::Grid => Box::new(GridGame::new(seed, width, GRID_OBSTACLE_RATE)),
        EnvKind::GuiScript => Box::new(GuiScript::shopping()),
    }
}

pub fn topic(episode_id: &str) -> String {
    format!("agent/{episode_id}")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EpisodeEvent {
    EpisodeStarted { episode_id: String, environment: String, goal: String, actions: Vec<String>, interactive: bool, max_steps: usize },
    Proposal { episode_id: String, step: usize, window_timestamps: Vec<f64>, action: AgentAction },
    Step { episode_id: String, record: StepRecord },
    EpisodeFinished { episode_id: String, steps: usize, terminal: bool, log_path: PathBuf },
    EpisodeFailed { episode_id: String, code: String, message: String },
}

fn line(event: &EpisodeEvent) -> String {
    serde_json::to_string(event).expect("events serialize")
}

#[derive(Debug, Clone, Deserialize)]
pub struct StartEpisode {
    pub env: EnvKind,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default)]
    pub interactive: bool,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_width")]
    pub width: usize,
}

fn default_max_steps() -> usize {
    20
}
fn default_seed() -> u64 {
    1
}
fn default_width() -> usize {
    DEFAULT_GRID_WIDTH
}

struct Pending {
    step: usize,
    reply: mpsc::Sender<Steering>,
}

pub struct Episode {
    pub id: String,
    pub spec: EnvironmentSpec,
    pub interactive: bool,
    pending: Mutex<Option<Pending>>,
}

#[derive(Debug, PartialEq, Eq)]
pub enum SteerError {
    NoPendingAction,
    StaleStep { pending: usize, got: usize },
    InvalidAction(String),
}

impl Episode {
    /// Hands the operator's verdict to the waiting step. `step`, when
    /// given, must name the step currently awaiting review.
    pub fn steer(&self, step: Option<usize>, steering: Steering) -> Result<usize, SteerError> {
        if let Steering::Override(name) = &steering {
            if self.spec.action(name).is_none() {
                return Err(SteerError::InvalidAction(name.clone()));
            }
        }
        let mut pending = self.pending.lock().expect("pending lock");
        let Some(p) = pending.as_ref() else {
            return Err(SteerError::NoPendingAction);
        };
        if let Some(got) = step.filter(|&s| s != p.step) {
            return Err(SteerError::StaleStep { pending: p.step, got });
        }
        let p = pending.take().expect("checked above");
        // the episode may have given up waiting in the meantime
        p.reply.send(steering).map_err(|_| SteerError::NoPendingAction)?;
        Ok(p.step)
    }

    pub fn pending_step(&self) -> Option<usize> {
        self.pending.lock().expect("pending lock").as_ref().map(|p| p.step)
    }
}

struct LiveHooks {
    episode: Arc<Episode>,
    hub: Arc<Hub>,
    review_timeout: Duration,
}

impl EpisodeHooks for LiveHooks {
    fn review(&mut self, step: usize, window: &[f64], proposed: &AgentAction) -> Steering {
        if !self.episode.interactive {
            return Steering::Approve;
        }
        let (tx, rx) = mpsc::channel();
        // pending is set before the proposal goes out so a quick reply is never refused
        *self.episode.pending.lock().expect("pending lock") = Some(Pending { step, reply: tx });
        let event = EpisodeEvent::Proposal {
            episode_id: self.episode.id.clone(),
            step,
            window_timestamps: window.to_vec(),
            action: proposed.clone(),
        };
        self.hub.publish(&topic(&self.episode.id), line(&event));
        match rx.recv_timeout(self.review_timeout) {
            Ok(s) => s,
            Err(_) => {
                self.episode.pending.lock().expect("pending lock").take();
                tracing::warn!(episode = %self.episode.id, step, "no operator decision; aborting");
                Steering::Abort
            }
        }
    }

    fn step_done(&mut self, record: &StepRecord) {
        let event = EpisodeEvent::Step { episode_id: self.episode.id.clone(), record: record.clone() };
        self.hub.publish(&topic(&self.episode.id), line(&event));
    }
}

pub struct Episodes {
    hub: Arc<Hub>,
    live: Mutex<HashMap<String, Arc<Episode>>>,
    log_dir: PathBuf,
    counter: AtomicU64,
    review_timeout: Duration,
}

impl Episodes {
    pub fn new(hub: Arc<Hub>, log_dir: &Path, review_timeout: Duration) -> Self {
        Self { hub, live: Mutex::new(HashMap::new()), log_dir: log_dir.to_path_buf(), counter: AtomicU64::new(0), review_timeout }
    }

    pub fn get(&self, id: &str) -> Option<Arc<Episode>> {
        self.live.lock().expect("episodes lock").get(id).cloned()
    }

    /// Registers the episode and returns it together with the blocking
    /// job that runs it; the caller picks the thread.
    pub fn start(
        self: &Arc<Self>,
        req: StartEpisode,
        backend: Arc<dyn ModelBackend>,
    ) -> Result<(Arc<Episode>, impl FnOnce() + Send + 'static), AgentError> {
        if req.max_steps == 0 {
            return Err(AgentError::InvalidInput("max_steps must be at least 1".into()));
        }
        let mut env = make_environment(req.env, req.seed, req.width);
        let spec = env.spec();
        spec.validate()?;
        let n = self.counter.fetch_add(1, Ordering::SeqCst);
        let stamp = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let id = format!("ep-{stamp}-{n}");
        let episode = Arc::new(Episode { id: id.clone(), spec: spec.clone(), interactive: req.interactive, pending: Mutex::new(None) });
        self.live.lock().expect("episodes lock").insert(id.clone(), episode.clone());

        let t = topic(&id);
        self.hub.open(&t);
        self.hub.publish(
            &t,
            line(&EpisodeEvent::EpisodeStarted {
                episode_id: id.clone(),
                environment: env.name(),
                goal: env.goal(),
                actions: spec.action_names().iter().map(|s| s.to_string()).collect(),
                interactive: req.interactive,
                max_steps: req.max_steps,
            }),
        );

        let this = self.clone();
        let ep = episode.clone();
        let job = move || {
            let mut hooks = LiveHooks { episode: ep.clone(), hub: this.hub.clone(), review_timeout: this.review_timeout };
            let result = run_episode(env.as_mut(), backend.as_ref(), req.max_steps, &mut hooks);
            let event = match result.and_then(|log| this.write_log(&ep.id, &log).map(|p| (log, p))) {
                Ok((log, log_path)) => EpisodeEvent::EpisodeFinished {
                    episode_id: ep.id.clone(),
                    steps: log.len(),
                    terminal: log.steps.last().is_some_and(|s| s.outcome.terminal),
                    log_path,
                },
                Err(e) => EpisodeEvent::EpisodeFailed { episode_id: ep.id.clone(), code: e.code().to_string(), message: e.to_string() },
            };
            this.hub.publish(&topic(&ep.id), line(&event));
            this.hub.close(&topic(&ep.id));
        };
        Ok((episode, job))
    }

    fn write_log(&self, id: &str, log: &vidscript_core::agent::EpisodeLog) -> Result<PathBuf, AgentError> {
        std::fs::create_dir_all(&self.log_dir).map_err(|e| AgentError::Log(e.to_string()))?;
        let path = self.log_dir.join(format!("{id}.ndjson"));
        std::fs::write(&path, log.to_ndjson()).map_err(|e| AgentError::Log(e.to_string()))?;
        Ok(path)
    }
}
