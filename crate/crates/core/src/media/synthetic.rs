//! A tiny procedural video container used for tests, demos and benchmarks.
//!
//! A `.vsyn` file is the magic line `VSYN1` followed by a JSON document that
//! lists time segments and the pattern painted during each. Patterns are
//! defined in normalised coordinates so frames can be rendered directly at
//! any resolution.

use std::io::Read;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{analysis_frame_count, downscale_long_edge, Decoder, Frame, MediaError, MediaInfo};

pub const MAGIC: &[u8] = b"VSYN1\n";
pub const FORMAT_NAME: &str = "vsyn";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pattern {
    Solid { rgb: [u8; 3] },
    /// Left-to-right linear blend.
    Gradient { from: [u8; 3], to: [u8; 3] },
    Checker { a: [u8; 3], b: [u8; 3], cols: u32, rows: u32 },
    /// A vertical bar sweeping across the frame once per `period_s`.
    MovingBar { background: [u8; 3], bar: [u8; 3], width_frac: f64, period_s: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start_s: f64,
    pub end_s: f64,
    pub pattern: Pattern,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticVideo {
    pub fps: f64,
    pub width: u32,
    pub height: u32,
    pub duration_s: f64,
    pub has_audio: bool,
    pub segments: Vec<Segment>,
}

fn lerp(a: u8, b: u8, f: f64) -> u8 {
    (a as f64 + (b as f64 - a as f64) * f).round().clamp(0.0, 255.0) as u8
}

impl SyntheticVideo {
    /// Sixty seconds of 640x360 at 30 fps: a few short scenes with hard
    /// cuts, then one long slowly-changing scene that needs splitting.
    pub fn demo_60s() -> Self {
        let seg = |s: f64, e: f64, pattern: Pattern| Segment { start_s: s, end_s: e, pattern };
        Self {
            fps: 30.0,
            width: 640,
            height: 360,
            duration_s: 60.0,
            has_audio: true,
            segments: vec![
                seg(0.0, 7.0, Pattern::Gradient { from: [200, 30, 30], to: [250, 120, 60] }),
                seg(7.0, 15.0, Pattern::Checker { a: [20, 20, 160], b: [230, 230, 240], cols: 8, rows: 6 }),
                seg(15.0, 19.5, Pattern::Solid { rgb: [30, 160, 40] }),
                seg(
                    19.5,
                    60.0,
                    Pattern::MovingBar { background: [40, 40, 40], bar: [90, 90, 90], width_frac: 0.1, period_s: 20.0 },
                ),
            ],
        }
    }

    pub fn frame_count(&self) -> usize {
        ((self.duration_s * self.fps).round() as usize).max(1)
    }

    /// Index of the frame presented nearest to `t`.
    pub fn frame_index(&self, t: f64) -> usize {
        ((t * self.fps).round().max(0.0) as usize).min(self.frame_count() - 1)
    }

    pub fn info(&self) -> MediaInfo {
        MediaInfo {
            duration_s: self.duration_s,
            fps: self.fps,
            width: self.width,
            height: self.height,
            has_audio: self.has_audio,
            container_format: FORMAT_NAME.to_string(),
        }
    }

    /// Renders the frame shown at time `t` at an arbitrary size.
    pub fn render(&self, t: f64, width: u32, height: u32) -> RgbImage {
        let seg = self.segments.iter().find(|s| t >= s.start_s && t < s.end_s);
        let Some(seg) = seg else {
            return RgbImage::new(width, height);
        };
        match &seg.pattern {
            Pattern::Solid { rgb } => RgbImage::from_pixel(width, height, Rgb(*rgb)),
            Pattern::Gradient { from, to } => RgbImage::from_fn(width, height, |x, _| {
                let f = if width > 1 { x as f64 / (width - 1) as f64 } else { 0.0 };
                Rgb([lerp(from[0], to[0], f), lerp(from[1], to[1], f), lerp(from[2], to[2], f)])
            }),
            Pattern::Checker { a, b, cols, rows } => {
                let cols = (*cols).max(1) as u64;
                let rows = (*rows).max(1) as u64;
                RgbImage::from_fn(width, height, |x, y| {
                    let cx = x as u64 * cols / width as u64;
                    let cy = y as u64 * rows / height as u64;
                    Rgb(if (cx + cy).is_multiple_of(2) { *a } else { *b })
                })
            }
            Pattern::MovingBar { background, bar, width_frac, period_s } => {
                let phase = ((t - seg.start_s) / period_s).rem_euclid(1.0);
                RgbImage::from_fn(width, height, |x, _| {
                    let u = (x as f64 + 0.5) / width as f64;
                    let d = (u - phase).rem_euclid(1.0);
                    Rgb(if d < *width_frac { *bar } else { *background })
                })
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend(serde_json::to_vec_pretty(self).expect("serializable"));
        out.push(b'\n');
        out
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, MediaError> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => MediaError::FileNotFound(path.to_path_buf()),
            _ => MediaError::Io(e),
        })?;
        if bytes.is_empty() {
            return Err(MediaError::UnsupportedFormat("zero-length file".into()));
        }
        let body = bytes
            .strip_prefix(MAGIC)
            .ok_or_else(|| MediaError::UnsupportedFormat("not a synthetic video".into()))?;
        let video: SyntheticVideo = serde_json::from_slice(body)
            .map_err(|e| MediaError::UnsupportedFormat(format!("bad synthetic video: {e}")))?;
        video.info().validated()?;
        Ok(video)
    }

    pub fn sniff(path: &Path) -> bool {
        let mut head = [0u8; 6];
        match std::fs::File::open(path).and_then(|mut f| f.read_exact(&mut head)) {
            Ok(()) => head == MAGIC,
            Err(_) => false,
        }
    }
}

/// Decodes `.vsyn` files in-process.
#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticDecoder;

impl Decoder for SyntheticDecoder {
    fn probe(&self, path: &Path) -> Result<MediaInfo, MediaError> {
        Ok(SyntheticVideo::load(path)?.info())
    }

    fn decode_at(&self, path: &Path, info: &MediaInfo, t: f64) -> Result<Frame, MediaError> {
        info.check_timestamp(t)?;
        let video = SyntheticVideo::load(path)?;
        let shown = video.frame_index(t) as f64 / video.fps;
        Ok(Frame::new(t, video.render(shown, video.width, video.height)))
    }

    fn extract_frames(&self, path: &Path, info: &MediaInfo, timestamps: &[f64]) -> Result<Vec<Frame>, MediaError> {
        for &t in timestamps {
            info.check_timestamp(t)?;
        }
        let video = SyntheticVideo::load(path)?;
        Ok(timestamps
            .iter()
            .map(|&t| {
                let shown = video.frame_index(t) as f64 / video.fps;
                Frame::new(t, video.render(shown, video.width, video.height))
            })
            .collect())
    }

    fn analysis_frames<'a>(
        &'a self,
        path: &'a Path,
        info: &'a MediaInfo,
        analysis_fps: f64,
        long_edge: u32,
    ) -> Box<dyn Iterator<Item = Result<Frame, MediaError>> + 'a> {
        let video = match SyntheticVideo::load(path) {
            Ok(v) => v,
            Err(e) => return Box::new(std::iter::once(Err(e))),
        };
        // same target size that downscale_long_edge would produce
        let (w, h) = downscale_long_edge(&RgbImage::new(video.width, video.height), long_edge).dimensions();
        let count = analysis_frame_count(info.duration_s, analysis_fps);
        Box::new((0..count).map(move |k| {
            let t = k as f64 / analysis_fps;
            let shown = video.frame_index(t) as f64 / video.fps;
            Ok(Frame::new(t, video.render(shown, w, h)))
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_file_and_probe() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demo.vsyn");
        let video = SyntheticVideo::demo_60s();
        video.write(&path).unwrap();
        assert!(SyntheticVideo::sniff(&path));
        let info = SyntheticDecoder.probe(&path).unwrap();
        assert_eq!(info.duration_s, 60.0);
        assert_eq!(info.fps, 30.0);
        assert_eq!((info.width, info.height), (640, 360));
    }

    #[test]
    fn frames_snap_within_half_period() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demo.vsyn");
        SyntheticVideo::demo_60s().write(&path).unwrap();
        let info = SyntheticDecoder.probe(&path).unwrap();
        let frames = SyntheticDecoder.extract_frames(&path, &info, &[0.0, 10.01, 20.0, 30.0]).unwrap();
        assert_eq!(frames.len(), 4);
        for (f, t) in frames.iter().zip([0.0, 10.01, 20.0, 30.0]) {
            assert!((f.timestamp_s - t).abs() <= 0.5 / 30.0 + 1e-9);
            assert_eq!(f.image.dimensions(), (640, 360));
        }
        assert!(matches!(
            SyntheticDecoder.extract_frames(&path, &info, &[61.0]),
            Err(MediaError::TimestampOutOfRange { .. })
        ));
    }

    #[test]
    fn zero_length_file_is_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.vsyn");
        std::fs::write(&path, b"").unwrap();
        assert!(matches!(SyntheticVideo::load(&path), Err(MediaError::UnsupportedFormat(_))));
    }
}
