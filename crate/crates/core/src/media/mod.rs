//! Probing video files, extracting frames through a decoder, and choosing
//! which timestamps to sample for each clip.

mod ppm;
mod subprocess;
pub mod synthetic;

use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ppm::{read_ppm, write_ppm};
pub use subprocess::{SubprocessDecoder, DECODER_BIN_ENV, PROBE_BIN_ENV};
pub use synthetic::{SyntheticDecoder, SyntheticVideo};

#[derive(Debug, Error)]
pub enum MediaError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("decoder binary unavailable: {bin}")]
    DecoderUnavailable { bin: String },
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("timestamp {timestamp_s}s outside [0, {duration_s}]")]
    TimestampOutOfRange { timestamp_s: f64, duration_s: f64 },
    #[error("decoder failed (exit {status:?}): {stderr}")]
    DecoderFailure { status: Option<i32>, stderr: String },
    #[error("invalid interval [{start_s}, {end_s})")]
    InvalidInterval { start_s: f64, end_s: f64 },
    #[error("invalid sample count {0}")]
    InvalidCount(usize),
    #[error("invalid frame set: {0}")]
    InvalidFrameSet(String),
    #[error("malformed PPM stream: {0}")]
    MalformedPpm(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl MediaError {
    pub fn code(&self) -> &'static str {
        match self {
            MediaError::FileNotFound(_) => "FileNotFound",
            MediaError::DecoderUnavailable { .. } => "DecoderUnavailable",
            MediaError::UnsupportedFormat(_) => "UnsupportedFormat",
            MediaError::TimestampOutOfRange { .. } => "TimestampOutOfRange",
            MediaError::DecoderFailure { .. } | MediaError::MalformedPpm(_) => "DecoderFailure",
            MediaError::InvalidInterval { .. } => "InvalidInterval",
            MediaError::InvalidCount(_) | MediaError::InvalidFrameSet(_) => "InvalidInput",
            MediaError::Io(_) => "IoError",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediaInfo {
    pub duration_s: f64,
    pub fps: f64,
    pub width: u32,
    pub height: u32,
    pub has_audio: bool,
    pub container_format: String,
}

impl MediaInfo {
    /// Rejects metadata that breaks the basic invariants (audio-only or
    /// corrupt containers end up here).
    pub fn validated(self) -> Result<Self, MediaError> {
        if !(self.duration_s >= 0.0) || !self.duration_s.is_finite() {
            return Err(MediaError::UnsupportedFormat(format!("bad duration {}", self.duration_s)));
        }
        if !(self.fps > 0.0) || !self.fps.is_finite() {
            return Err(MediaError::UnsupportedFormat(format!("bad frame rate {}", self.fps)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(MediaError::UnsupportedFormat("no video stream".into()));
        }
        Ok(self)
    }

    pub fn frame_period_s(&self) -> f64 {
        1.0 / self.fps
    }

    pub fn check_timestamp(&self, t: f64) -> Result<(), MediaError> {
        if t.is_finite() && t >= 0.0 && t <= self.duration_s {
            Ok(())
        } else {
            Err(MediaError::TimestampOutOfRange { timestamp_s: t, duration_s: self.duration_s })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub timestamp_s: f64,
    pub image: RgbImage,
}

impl Frame {
    pub fn new(timestamp_s: f64, image: RgbImage) -> Self {
        Self { timestamp_s, image }
    }

    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }
}

/// The frames sampled for one clip, in ascending time order.
#[derive(Debug, Clone)]
pub struct FrameSet {
    clip_id: usize,
    frames: Vec<Frame>,
}

impl FrameSet {
    pub fn new(clip_id: usize, frames: Vec<Frame>) -> Result<Self, MediaError> {
        if frames.is_empty() {
            return Err(MediaError::InvalidFrameSet("no frames".into()));
        }
        if frames.windows(2).any(|w| w[1].timestamp_s <= w[0].timestamp_s) {
            return Err(MediaError::InvalidFrameSet("timestamps not strictly ascending".into()));
        }
        Ok(Self { clip_id, frames })
    }

    pub fn clip_id(&self) -> usize {
        self.clip_id
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }
}

/// Timestamps at the centres of `n` equal subintervals of `[start, end)`.
///
/// Sampling at centres rather than edges keeps adjacent clips from ever
/// sampling the same instant.
pub fn sample_clip_timestamps(start_s: f64, end_s: f64, n: usize) -> Result<Vec<f64>, MediaError> {
    if !(end_s > start_s) || !start_s.is_finite() || !end_s.is_finite() {
        return Err(MediaError::InvalidInterval { start_s, end_s });
    }
    if n == 0 {
        return Err(MediaError::InvalidCount(n));
    }
    let step = (end_s - start_s) / n as f64;
    Ok((0..n).map(|i| start_s + (i as f64 + 0.5) * step).collect())
}

/// Shrinks an image so its longer edge is at most `max_edge` pixels,
/// preserving aspect ratio. Images already small enough are copied as is.
pub fn downscale_long_edge(image: &RgbImage, max_edge: u32) -> RgbImage {
    let (w, h) = image.dimensions();
    let long = w.max(h);
    if long <= max_edge || max_edge == 0 {
        return image.clone();
    }
    let scale = max_edge as f64 / long as f64;
    let nw = ((w as f64 * scale).round() as u32).max(1);
    let nh = ((h as f64 * scale).round() as u32).max(1);
    image::imageops::resize(image, nw, nh, image::imageops::FilterType::Triangle)
}

/// A source of decoded frames. Implementations must be usable from several
/// worker threads at once.
pub trait Decoder: Send + Sync {
    fn probe(&self, path: &Path) -> Result<MediaInfo, MediaError>;

    /// Decodes the frame nearest to `timestamp_s`. Callers have already
    /// range-checked the timestamp.
    fn decode_at(&self, path: &Path, info: &MediaInfo, timestamp_s: f64) -> Result<Frame, MediaError>;

    /// One frame per requested timestamp, in request order.
    fn extract_frames(
        &self,
        path: &Path,
        info: &MediaInfo,
        timestamps: &[f64],
    ) -> Result<Vec<Frame>, MediaError> {
        for &t in timestamps {
            info.check_timestamp(t)?;
        }
        timestamps.iter().map(|&t| self.decode_at(path, info, t)).collect()
    }

    /// Frames at `analysis_fps` covering the whole video, downscaled to
    /// `long_edge` pixels. Yields lazily so only a couple of frames are
    /// resident at a time.
    fn analysis_frames<'a>(
        &'a self,
        path: &'a Path,
        info: &'a MediaInfo,
        analysis_fps: f64,
        long_edge: u32,
    ) -> Box<dyn Iterator<Item = Result<Frame, MediaError>> + 'a> {
        let count = analysis_frame_count(info.duration_s, analysis_fps);
        Box::new((0..count).map(move |k| {
            let t = k as f64 / analysis_fps;
            let frame = self.decode_at(path, info, t)?;
            Ok(Frame::new(t, downscale_long_edge(&frame.image, long_edge)))
        }))
    }
}

/// Number of analysis samples `k / fps` strictly before `duration_s`.
pub fn analysis_frame_count(duration_s: f64, analysis_fps: f64) -> usize {
    if duration_s <= 0.0 || analysis_fps <= 0.0 {
        return 0;
    }
    let n = (duration_s * analysis_fps).ceil() as usize;
    // guard against k/fps == duration from rounding
    (0..=n).take_while(|k| (*k as f64 / analysis_fps) < duration_s).count()
}

/// Picks the in-process synthetic decoder for `.vsyn` assets and the
/// external decoder process for everything else.
#[derive(Debug, Clone, Default)]
pub struct AutoDecoder {
    synthetic: SyntheticDecoder,
    external: SubprocessDecoder,
}

impl AutoDecoder {
    pub fn new(external: SubprocessDecoder) -> Self {
        Self { synthetic: SyntheticDecoder, external }
    }

    fn pick(&self, path: &Path) -> &dyn Decoder {
        if SyntheticVideo::sniff(path) {
            &self.synthetic
        } else {
            &self.external
        }
    }
}

impl Decoder for AutoDecoder {
    fn probe(&self, path: &Path) -> Result<MediaInfo, MediaError> {
        self.pick(path).probe(path)
    }

    fn decode_at(&self, path: &Path, info: &MediaInfo, t: f64) -> Result<Frame, MediaError> {
        self.pick(path).decode_at(path, info, t)
    }

    fn analysis_frames<'a>(
        &'a self,
        path: &'a Path,
        info: &'a MediaInfo,
        analysis_fps: f64,
        long_edge: u32,
    ) -> Box<dyn Iterator<Item = Result<Frame, MediaError>> + 'a> {
        self.pick(path).analysis_frames(path, info, analysis_fps, long_edge)
    }
}
