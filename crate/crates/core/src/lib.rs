//! Video-to-script pipeline engine.
//!
//! A video is probed, cut into clips at shot boundaries, transcribed, and
//! described clip by clip by a multimodal model; the descriptions and the
//! transcript are then merged into one timestamped script. On top of the
//! script sit grounded question answering (answers carry verified
//! timestamp citations) and a timed audio-description track. A separate
//! streaming mode drives an agent from a sliding window of frames.

// `!(x > 0.0)` is used on purpose so NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent;
pub mod backends;
pub mod describe;
pub mod interval;
pub mod knowledge;
pub mod media;
pub mod pipeline;
pub mod prompt;
pub mod qa;
pub mod scene;
pub mod script;
pub mod timecode;
pub mod transcript;
mod workpool;

pub use backends::{AsrBackend, BackendError, LmmRequest, LmmResponse, ModelBackend};
pub use describe::ClipDescription;
pub use knowledge::{FaceEntry, KnowledgePack};
pub use media::{Frame, FrameSet, MediaInfo};
pub use qa::{GroundedAnswer, ScriptCorpus};
pub use scene::{Clip, ClipSource, SceneBoundary, SegmentationConfig};
pub use script::{AdCue, Script, ScriptEntry};
pub use transcript::{Transcript, TranscriptSegment};
pub use agent::{AgentAction, AgentState, EnvironmentSpec};
pub use pipeline::{Job, JobConfig, Pipeline, Stage};
