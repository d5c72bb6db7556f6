//! The streaming agent loop: a sliding window of recent frames is the
//! state, the model picks the next action from a fixed vocabulary, and the
//! environment applies it.

mod env;

use std::collections::{BTreeMap, VecDeque};
use std::io::{BufRead, Write};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::backends::{BackendError, LmmRequest, ModelBackend, Task};
use crate::media::Frame;
use crate::prompt::{self, TemplateError};
use crate::timecode::format_vtt;

pub use env::{environment_from_name, GridGame, GuiScreen, GuiScript, GuiTransition, GRID_CELL_PX};

pub const DEFAULT_WINDOW: usize = 3;
pub const DEFAULT_HISTORY: usize = 8;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("the frame window is empty")]
    EmptyWindow,
    #[error("frame at {got}s is earlier than the last frame at {last}s")]
    NonMonotonicTimestamp { last: f64, got: f64 },
    #[error("could not parse an action from {raw:?}: {reason}")]
    UnparseableAction { raw: String, reason: String },
    #[error("environment failed at step {step}: {message}")]
    Environment { step: usize, message: String },
    #[error("invalid environment spec: {0}")]
    InvalidSpec(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("episode aborted by the operator at step {0}")]
    Aborted(usize),
    #[error("episode log: {0}")]
    Log(String),
}

impl AgentError {
    pub fn code(&self) -> &'static str {
        match self {
            AgentError::Backend(e) => e.code(),
            AgentError::Template(_) => "UnknownTemplate",
            AgentError::EmptyWindow => "EmptyWindow",
            AgentError::NonMonotonicTimestamp { .. } => "NonMonotonicTimestamp",
            AgentError::UnparseableAction { .. } => "UnparseableAction",
            AgentError::Environment { .. } => "EnvironmentError",
            AgentError::InvalidSpec(_) => "InvalidSpec",
            AgentError::InvalidInput(_) => "InvalidInput",
            AgentError::Aborted(_) => "Aborted",
            AgentError::Log(_) => "InvalidEpisodeLog",
        }
    }
}

/// One entry of the action vocabulary with the argument names it accepts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub name: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default)]
    pub help: String,
}

impl ActionSpec {
    pub fn new(name: &str, args: &[&str], help: &str) -> Self {
        Self { name: name.into(), args: args.iter().map(|s| s.to_string()).collect(), help: help.into() }
    }

    fn signature(&self) -> String {
        let args: Vec<String> = self.args.iter().map(|a| format!("{a}=...")).collect();
        let mut s = format!("{}({})", self.name, args.join(", "));
        if !self.help.is_empty() {
            s.push_str(" - ");
            s.push_str(&self.help);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub actions: Vec<ActionSpec>,
    pub window_size: usize,
    pub history_size: usize,
    pub template_id: String,
}

impl EnvironmentSpec {
    pub fn new(actions: Vec<ActionSpec>) -> Self {
        Self {
            actions,
            window_size: DEFAULT_WINDOW,
            history_size: DEFAULT_HISTORY,
            template_id: prompt::AGENT_STEP.to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        if self.window_size == 0 {
            return Err(AgentError::InvalidSpec("window size must be at least 1".into()));
        }
        if self.actions.is_empty() {
            return Err(AgentError::InvalidSpec("empty action vocabulary".into()));
        }
        Ok(())
    }

    pub fn action(&self, name: &str) -> Option<&ActionSpec> {
        self.actions.iter().find(|a| a.name == name)
    }

    pub fn action_names(&self) -> Vec<&str> {
        self.actions.iter().map(|a| a.name.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentAction {
    pub name: String,
    pub arguments: BTreeMap<String, String>,
    pub rationale: String,
    pub raw: String,
}

impl AgentAction {
    /// An action chosen by an operator rather than the model.
    pub fn operator(name: &str) -> Self {
        Self { name: name.into(), arguments: BTreeMap::new(), rationale: "operator override".into(), raw: String::new() }
    }

    pub fn call_text(&self) -> String {
        let args: Vec<String> = self.arguments.iter().map(|(k, v)| format!("{k}={v}")).collect();
        format!("{}({})", self.name, args.join(", "))
    }
}

#[derive(Debug, Clone)]
pub struct AgentState {
    window: VecDeque<Frame>,
    capacity: usize,
    history: VecDeque<AgentAction>,
    history_capacity: usize,
    pub goal: String,
}

impl AgentState {
    pub fn new(goal: impl Into<String>, spec: &EnvironmentSpec) -> Self {
        Self {
            window: VecDeque::with_capacity(spec.window_size),
            capacity: spec.window_size.max(1),
            history: VecDeque::new(),
            history_capacity: spec.history_size,
            goal: goal.into(),
        }
    }

    /// Appends a frame, evicting the oldest beyond capacity. Equal
    /// timestamps are allowed; earlier ones are not.
    pub fn push_frame(&mut self, frame: Frame) -> Result<(), AgentError> {
        if let Some(last) = self.window.back() {
            if frame.timestamp_s < last.timestamp_s {
                return Err(AgentError::NonMonotonicTimestamp { last: last.timestamp_s, got: frame.timestamp_s });
            }
        }
        self.window.push_back(frame);
        while self.window.len() > self.capacity {
            self.window.pop_front();
        }
        Ok(())
    }

    pub fn record_action(&mut self, action: AgentAction) {
        if self.history_capacity == 0 {
            return;
        }
        self.history.push_back(action);
        while self.history.len() > self.history_capacity {
            self.history.pop_front();
        }
    }

    pub fn window(&self) -> impl Iterator<Item = &Frame> {
        self.window.iter()
    }

    pub fn window_timestamps(&self) -> Vec<f64> {
        self.window.iter().map(|f| f.timestamp_s).collect()
    }

    pub fn history(&self) -> impl Iterator<Item = &AgentAction> {
        self.history.iter()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

static ACTION_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?s)ACTION:\s*([A-Za-z_][A-Za-z0-9_]*)\s*\(([^)]*)\)\s*(?:RATIONALE:\s*(.*))?").expect("valid regex")
});

/// Parses `ACTION: name(k=v, ...) RATIONALE: text` and checks it against
/// the vocabulary.
pub fn parse_action(raw: &str, spec: &EnvironmentSpec) -> Result<AgentAction, String> {
    let caps = ACTION_RE.captures(raw).ok_or_else(|| "no ACTION: line".to_string())?;
    let name = caps[1].to_string();
    let action_spec = spec.action(&name).ok_or_else(|| format!("{name} is not an allowed action"))?;
    let mut arguments = BTreeMap::new();
    for part in caps[2].split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(|| format!("argument {part:?} is not key=value"))?;
        let k = k.trim();
        if !action_spec.args.iter().any(|a| a == k) {
            return Err(format!("{name} takes no argument {k:?}"));
        }
        arguments.insert(k.to_string(), v.trim().trim_matches('"').to_string());
    }
    let rationale = caps.get(3).map(|m| m.as_str().trim().to_string()).unwrap_or_default();
    Ok(AgentAction { name, arguments, rationale, raw: raw.to_string() })
}

fn step_request(state: &AgentState, spec: &EnvironmentSpec, reminder: &str) -> Result<LmmRequest, AgentError> {
    let frames: Vec<String> = state
        .window
        .iter()
        .enumerate()
        .map(|(i, f)| format!("image {} at {}", i + 1, format_vtt(f.timestamp_s)))
        .collect();
    let history: Vec<String> = state.history.iter().map(AgentAction::call_text).collect();
    let vars: BTreeMap<&str, String> = [
        ("goal", state.goal.clone()),
        ("frames", frames.join("\n")),
        ("actions", spec.actions.iter().map(ActionSpec::signature).collect::<Vec<_>>().join("\n")),
        ("history", if history.is_empty() { "(none)".to_string() } else { history.join("\n") }),
        ("reminder", reminder.to_string()),
    ]
    .into();
    let mut req = LmmRequest::text(Task::AgentStep, prompt::render(&spec.template_id, &vars)?)
        .with_tag("actions", spec.action_names().join(","));
    req.images = state.window.iter().map(|f| f.image.clone()).collect();
    req.max_response_tokens = 256;
    Ok(req)
}

/// Asks the model for the next action. A reply that does not parse, or
/// names an action outside the vocabulary, gets one stricter reprompt.
pub fn decide(state: &AgentState, spec: &EnvironmentSpec, backend: &dyn ModelBackend) -> Result<AgentAction, AgentError> {
    if state.window.is_empty() {
        return Err(AgentError::EmptyWindow);
    }
    let first = backend.complete(&step_request(state, spec, "")?)?.text;
    let reason = match parse_action(&first, spec) {
        Ok(a) => return Ok(a),
        Err(reason) => reason,
    };
    debug!(%reason, "reprompting agent step");
    let reminder = format!(
        "Your previous reply could not be used ({reason}). Reply with exactly one line starting with ACTION: and use only these action names: {}.",
        spec.action_names().join(", ")
    );
    let second = backend.complete(&step_request(state, spec, &reminder)?.with_tag("attempt", "2"))?.text;
    parse_action(&second, spec).map_err(|reason| AgentError::UnparseableAction { raw: second, reason })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub message: String,
    pub terminal: bool,
}

/// What the agent acts on. Implementations must be deterministic for a
/// given construction if episodes are to be reproducible.
pub trait Environment: Send {
    fn name(&self) -> String;
    fn spec(&self) -> EnvironmentSpec;
    fn goal(&self) -> String;
    fn observe(&mut self) -> Result<Frame, String>;
    fn apply(&mut self, action: &AgentAction) -> Result<StepOutcome, String>;
}

/// An operator's verdict on a proposed action.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Steering {
    Approve,
    Override(String),
    Abort,
}

pub trait EpisodeHooks {
    /// Called with the model's proposal before it is applied.
    fn review(&mut self, _step: usize, _window: &[f64], _proposed: &AgentAction) -> Steering {
        Steering::Approve
    }
    fn step_done(&mut self, _record: &StepRecord) {}
}

pub struct NoHooks;
impl EpisodeHooks for NoHooks {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub window_timestamps: Vec<f64>,
    pub action: AgentAction,
    /// The model's proposal when an operator replaced it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposed: Option<AgentAction>,
    pub outcome: StepOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    pub environment: String,
    pub goal: String,
    pub backend_id: String,
    pub spec: EnvironmentSpec,
    pub max_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub header: EpisodeHeader,
    pub steps: Vec<StepRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum LogLine {
    Header(EpisodeHeader),
    Step(StepRecord),
}

impl EpisodeLog {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn header_line(&self) -> String {
        serde_json::to_string(&LogLine::Header(self.header.clone())).expect("serializable")
    }

    pub fn step_line(step: &StepRecord) -> String {
        serde_json::to_string(&LogLine::Step(step.clone())).expect("serializable")
    }

    /// Newline-delimited records: one header, then one line per step.
    pub fn to_ndjson(&self) -> String {
        let mut out = self.header_line();
        out.push('\n');
        for s in &self.steps {
            out.push_str(&Self::step_line(s));
            out.push('\n');
        }
        out
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(self.to_ndjson().as_bytes())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self, AgentError> {
        let mut header = None;
        let mut steps = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line.map_err(|e| AgentError::Log(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line).map_err(|e| AgentError::Log(format!("line {}: {e}", n + 1)))? {
                LogLine::Header(h) if header.is_none() => header = Some(h),
                LogLine::Header(_) => return Err(AgentError::Log(format!("line {}: second header", n + 1))),
                LogLine::Step(s) => steps.push(s),
            }
        }
        let header = header.ok_or_else(|| AgentError::Log("missing header record".into()))?;
        Ok(Self { header, steps })
    }
}

/// observe, push, decide, apply, log; until the environment reports a
/// terminal state or `max_steps` steps were taken.
pub fn run_episode(
    env: &mut dyn Environment,
    backend: &dyn ModelBackend,
    max_steps: usize,
    hooks: &mut dyn EpisodeHooks,
) -> Result<EpisodeLog, AgentError> {
    if max_steps == 0 {
        return Err(AgentError::InvalidInput("max_steps must be at least 1".into()));
    }
    let spec = env.spec();
    spec.validate()?;
    let mut state = AgentState::new(env.goal(), &spec);
    let mut log = EpisodeLog {
        header: EpisodeHeader {
            environment: env.name(),
            goal: env.goal(),
            backend_id: backend.id(),
            spec: spec.clone(),
            max_steps,
        },
        steps: Vec::new(),
    };
    for step in 0..max_steps {
        let frame = env.observe().map_err(|message| AgentError::Environment { step, message })?;
        state.push_frame(frame)?;
        let proposed = decide(&state, &spec, backend)?;
        let window = state.window_timestamps();
        let (action, replaced) = match hooks.review(step, &window, &proposed) {
            Steering::Approve => (proposed, None),
            Steering::Override(name) => {
                if spec.action(&name).is_none() {
                    return Err(AgentError::InvalidInput(format!("override {name:?} is not an allowed action")));
                }
                (AgentAction::operator(&name), Some(proposed))
            }
            Steering::Abort => return Err(AgentError::Aborted(step)),
        };
        let outcome = env.apply(&action).map_err(|message| AgentError::Environment { step, message })?;
        state.record_action(action.clone());
        let record = StepRecord { step, window_timestamps: window, action, proposed: replaced, outcome };
        hooks.step_done(&record);
        let terminal = record.outcome.terminal;
        log.steps.push(record);
        if terminal {
            break;
        }
    }
    Ok(log)
}

/// Re-applies the logged actions to a fresh environment and reports the
/// first step whose outcome differs from the log.
pub fn replay_episode(log: &EpisodeLog, env: &mut dyn Environment) -> Result<(), AgentError> {
    for rec in &log.steps {
        env.observe().map_err(|message| AgentError::Environment { step: rec.step, message })?;
        let outcome = env.apply(&rec.action).map_err(|message| AgentError::Environment { step: rec.step, message })?;
        if outcome != rec.outcome {
            warn!(step = rec.step, "replay diverged");
            return Err(AgentError::Log(format!(
                "step {} diverged: logged {:?}, replayed {:?}",
                rec.step, rec.outcome.message, outcome.message
            )));
        }
    }
    Ok(())
}
