//! Content-based shot boundary detection and conversion of boundaries into
//! bounded-length clips.
//!
//! Each analysis frame is converted to HSV with all three channels on a
//! 0..=255 scale; the content delta between consecutive frames is the mean
//! over pixels of `(|dH| + |dS| + |dV|) / 3`. A cut is declared when the
//! delta reaches the threshold and the previous cut (or the start of the
//! video) is at least `min_scene_len_s` behind.

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::media::Frame;

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("frame dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((u32, u32), (u32, u32)),
    #[error("frame stream is empty")]
    EmptyStream,
    #[error("frame timestamps must be strictly ascending ({prev} then {cur})")]
    NonAscending { prev: f64, cur: f64 },
    #[error("invalid segmentation config: {0}")]
    InvalidConfig(String),
    #[error("invalid boundaries: {0}")]
    InvalidBoundaries(String),
}

impl SceneError {
    pub fn code(&self) -> &'static str {
        match self {
            SceneError::DimensionMismatch(..) => "DimensionMismatch",
            SceneError::EmptyStream => "EmptyStream",
            SceneError::NonAscending { .. } => "InvalidInput",
            SceneError::InvalidConfig(_) => "InvalidConfig",
            SceneError::InvalidBoundaries(_) => "InvalidBoundaries",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneBoundary {
    pub timestamp_s: f64,
    pub delta_score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipSource {
    SceneCut,
    SplitOfLongScene,
    WholeVideo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub clip_id: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub source: ClipSource,
}

impl Clip {
    pub fn len_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.start_s, self.end_s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationConfig {
    pub threshold: f64,
    pub min_scene_len_s: f64,
    pub max_clip_len_s: f64,
    pub analysis_fps: f64,
    pub downscale_edge_px: u32,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            threshold: 27.0,
            min_scene_len_s: 1.0,
            max_clip_len_s: 30.0,
            analysis_fps: 4.0,
            downscale_edge_px: 256,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let positive = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(SceneError::InvalidConfig(format!("{name} must be positive, got {v}")))
            }
        };
        positive(self.threshold, "threshold")?;
        positive(self.min_scene_len_s, "min_scene_len_s")?;
        positive(self.max_clip_len_s, "max_clip_len_s")?;
        positive(self.analysis_fps, "analysis_fps")?;
        if self.downscale_edge_px == 0 {
            return Err(SceneError::InvalidConfig("downscale_edge_px must be positive".into()));
        }
        if self.max_clip_len_s < self.min_scene_len_s {
            return Err(SceneError::InvalidConfig("max_clip_len_s < min_scene_len_s".into()));
        }
        Ok(())
    }
}

/// HSV planes of one frame, interleaved, every channel on 0..=255.
#[derive(Debug, Clone)]
pub struct HsvFrame {
    width: u32,
    height: u32,
    data: Vec<f32>,
}

/// Converts one RGB pixel. Hue is 0 for achromatic pixels.
pub fn rgb_to_hsv255(rgb: [u8; 3]) -> [f32; 3] {
    let r = rgb[0] as f32;
    let g = rgb[1] as f32;
    let b = rgb[2] as f32;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let chroma = max - min;
    let v = max;
    let s = if max > 0.0 { chroma / max * 255.0 } else { 0.0 };
    let h_deg = if chroma == 0.0 {
        0.0
    } else if max == r {
        (60.0 * (g - b) / chroma).rem_euclid(360.0)
    } else if max == g {
        60.0 * (b - r) / chroma + 120.0
    } else {
        60.0 * (r - g) / chroma + 240.0
    };
    [h_deg * 255.0 / 360.0, s, v]
}

impl HsvFrame {
    pub fn from_rgb(image: &RgbImage) -> Self {
        let mut data = Vec::with_capacity(image.as_raw().len());
        for px in image.pixels() {
            data.extend_from_slice(&rgb_to_hsv255(px.0));
        }
        Self { width: image.width(), height: image.height(), data }
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn delta(&self, other: &HsvFrame) -> Result<f64, SceneError> {
        if self.dimensions() != other.dimensions() {
            return Err(SceneError::DimensionMismatch(self.dimensions(), other.dimensions()));
        }
        let pixels = (self.width as usize) * (self.height as usize);
        if pixels == 0 {
            return Ok(0.0);
        }
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        Ok(sum / 3.0 / pixels as f64)
    }
}

/// Content delta between two frames, in `[0, 255]`.
pub fn frame_delta(prev: &Frame, cur: &Frame) -> Result<f64, SceneError> {
    HsvFrame::from_rgb(&prev.image).delta(&HsvFrame::from_rgb(&cur.image))
}

/// Streaming detector: feed frames in time order, collect boundaries.
/// Holds only the previous frame's HSV planes.
#[derive(Debug)]
pub struct SceneDetector {
    config: SegmentationConfig,
    prev: Option<(f64, HsvFrame)>,
    last_cut_s: f64,
    seen: usize,
    boundaries: Vec<SceneBoundary>,
}

impl SceneDetector {
    pub fn new(config: SegmentationConfig) -> Result<Self, SceneError> {
        config.validate()?;
        Ok(Self { config, prev: None, last_cut_s: 0.0, seen: 0, boundaries: Vec::new() })
    }

    pub fn push(&mut self, frame: &Frame) -> Result<Option<SceneBoundary>, SceneError> {
        let hsv = HsvFrame::from_rgb(&frame.image);
        let t = frame.timestamp_s;
        self.seen += 1;
        let mut emitted = None;
        if let Some((prev_t, prev)) = &self.prev {
            if t <= *prev_t {
                return Err(SceneError::NonAscending { prev: *prev_t, cur: t });
            }
            let delta = prev.delta(&hsv)?;
            if delta >= self.config.threshold && t - self.last_cut_s >= self.config.min_scene_len_s {
                let b = SceneBoundary { timestamp_s: t, delta_score: delta };
                self.boundaries.push(b);
                self.last_cut_s = t;
                emitted = Some(b);
            }
        }
        self.prev = Some((t, hsv));
        Ok(emitted)
    }

    pub fn boundaries(&self) -> &[SceneBoundary] {
        &self.boundaries
    }

    pub fn finish(self) -> Result<Vec<SceneBoundary>, SceneError> {
        if self.seen == 0 {
            return Err(SceneError::EmptyStream);
        }
        Ok(self.boundaries)
    }
}

/// Runs the detector over an in-memory or lazily produced frame sequence.
pub fn detect_scenes<'a, I>(frames: I, config: &SegmentationConfig) -> Result<Vec<SceneBoundary>, SceneError>
where
    I: IntoIterator<Item = &'a Frame>,
{
    let mut det = SceneDetector::new(*config)?;
    for f in frames {
        det.push(f)?;
    }
    det.finish()
}

fn split_evenly(start: f64, end: f64, max_len: f64, source: ClipSource, out: &mut Vec<Clip>) {
    let len = end - start;
    // the epsilon absorbs float noise such as 90.00000000001 / 30
    let parts = ((len / max_len - 1e-9).ceil() as usize).max(1);
    let src = if parts > 1 && source == ClipSource::SceneCut { ClipSource::SplitOfLongScene } else { source };
    let step = len / parts as f64;
    for i in 0..parts {
        let s = if i == 0 { start } else { start + step * i as f64 };
        let e = if i + 1 == parts { end } else { start + step * (i + 1) as f64 };
        out.push(Clip { clip_id: out.len(), start_s: s, end_s: e, source: src });
    }
}

/// Turns scene cuts into clips tiling `[0, duration_s]`. Scenes longer than
/// the configured maximum are split into equal parts.
pub fn clips_from_boundaries(
    boundaries: &[f64],
    duration_s: f64,
    config: &SegmentationConfig,
) -> Result<Vec<Clip>, SceneError> {
    config.validate()?;
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return Err(SceneError::InvalidBoundaries(format!("duration {duration_s} must be positive")));
    }
    for (i, &b) in boundaries.iter().enumerate() {
        if !(b > 0.0 && b < duration_s) {
            return Err(SceneError::InvalidBoundaries(format!("boundary {b} outside (0, {duration_s})")));
        }
        if i > 0 && b <= boundaries[i - 1] {
            return Err(SceneError::InvalidBoundaries("boundaries not ascending".into()));
        }
    }
    let mut clips = Vec::new();
    if boundaries.is_empty() {
        split_evenly(0.0, duration_s, config.max_clip_len_s, ClipSource::WholeVideo, &mut clips);
        return Ok(clips);
    }
    let mut edges = Vec::with_capacity(boundaries.len() + 2);
    edges.push(0.0);
    edges.extend_from_slice(boundaries);
    edges.push(duration_s);
    for w in edges.windows(2) {
        split_evenly(w[0], w[1], config.max_clip_len_s, ClipSource::SceneCut, &mut clips);
    }
    Ok(clips)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;

    fn solid(t: f64, rgb: [u8; 3]) -> Frame {
        Frame::new(t, RgbImage::from_pixel(2, 2, Rgb(rgb)))
    }

    #[test]
    fn identical_frames_zero() {
        let a = solid(0.0, [12, 200, 99]);
        assert_eq!(frame_delta(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn black_white_is_85() {
        // black: H=0 S=0 V=0; white: H=0 S=0 V=255 -> (0+0+255)/3
        let d = frame_delta(&solid(0.0, [0, 0, 0]), &solid(0.25, [255, 255, 255])).unwrap();
        assert!((d - 85.0).abs() < 1e-9);
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(rgb_to_hsv255([255, 0, 0]), [0.0, 255.0, 255.0]);
        let g = rgb_to_hsv255([0, 255, 0]);
        assert!((g[0] - 85.0).abs() < 1e-4);
        let b = rgb_to_hsv255([0, 0, 255]);
        assert!((b[0] - 170.0).abs() < 1e-4);
    }

    #[test]
    fn dimension_mismatch() {
        let a = Frame::new(0.0, RgbImage::new(2, 2));
        let b = Frame::new(0.0, RgbImage::new(3, 2));
        assert!(matches!(frame_delta(&a, &b), Err(SceneError::DimensionMismatch(..))));
    }

    #[test]
    fn empty_and_single_frame_streams() {
        let cfg = SegmentationConfig::default();
        assert_eq!(detect_scenes(std::iter::empty(), &cfg), Err(SceneError::EmptyStream));
        let one = [solid(0.0, [1, 2, 3])];
        assert_eq!(detect_scenes(&one, &cfg).unwrap(), vec![]);
    }

    #[test]
    fn constant_stream_no_cuts() {
        let frames: Vec<Frame> = (0..240).map(|k| solid(k as f64 / 4.0, [40, 80, 120])).collect();
        assert!(detect_scenes(&frames, &SegmentationConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn no_split_needed() {
        let clips = clips_from_boundaries(&[], 25.0, &SegmentationConfig::default()).unwrap();
        assert_eq!(clips, vec![Clip { clip_id: 0, start_s: 0.0, end_s: 25.0, source: ClipSource::WholeVideo }]);
    }

    #[test]
    fn whole_video_split_in_three() {
        let clips = clips_from_boundaries(&[], 90.0, &SegmentationConfig::default()).unwrap();
        let spans: Vec<(f64, f64)> = clips.iter().map(Clip::interval).collect();
        assert_eq!(spans, vec![(0.0, 30.0), (30.0, 60.0), (60.0, 90.0)]);
        assert!(clips.iter().all(|c| c.source == ClipSource::WholeVideo));
    }

    #[test]
    fn invalid_boundaries() {
        let cfg = SegmentationConfig::default();
        assert!(clips_from_boundaries(&[5.0, 3.0], 10.0, &cfg).is_err());
        assert!(clips_from_boundaries(&[0.0], 10.0, &cfg).is_err());
        assert!(clips_from_boundaries(&[10.0], 10.0, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        let cfg = SegmentationConfig { max_clip_len_s: 0.5, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = SegmentationConfig { threshold: 0.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #[test]
        fn delta_symmetric_and_bounded(a in proptest::collection::vec(any::<u8>(), 12), b in proptest::collection::vec(any::<u8>(), 12)) {
            let fa = Frame::new(0.0, RgbImage::from_raw(2, 2, a).unwrap());
            let fb = Frame::new(0.0, RgbImage::from_raw(2, 2, b).unwrap());
            let ab = frame_delta(&fa, &fb).unwrap();
            let ba = frame_delta(&fb, &fa).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=255.0).contains(&ab));
        }
    }
}
