use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde::Deserialize;
use tracing::debug;

use super::{downscale_long_edge, read_ppm, Decoder, Frame, MediaError, MediaInfo};

pub const DECODER_BIN_ENV: &str = "VIDSCRIPT_DECODER_BIN";
pub const PROBE_BIN_ENV: &str = "VIDSCRIPT_PROBE_BIN";

/// Drives an ffmpeg-compatible decoder and ffprobe-compatible prober as
/// child processes.
#[derive(Debug, Clone)]
pub struct SubprocessDecoder {
    pub decoder_bin: PathBuf,
    pub probe_bin: PathBuf,
}

impl Default for SubprocessDecoder {
    fn default() -> Self {
        Self::from_env()
    }
}

#[derive(Deserialize)]
struct ProbeOutput {
    #[serde(default)]
    streams: Vec<ProbeStream>,
    format: Option<ProbeFormat>,
}

#[derive(Deserialize)]
struct ProbeStream {
    codec_type: Option<String>,
    width: Option<u32>,
    height: Option<u32>,
    avg_frame_rate: Option<String>,
}

#[derive(Deserialize)]
struct ProbeFormat {
    duration: Option<String>,
    format_name: Option<String>,
}

fn parse_rate(rate: &str) -> Option<f64> {
    match rate.split_once('/') {
        Some((n, d)) => {
            let n: f64 = n.trim().parse().ok()?;
            let d: f64 = d.trim().parse().ok()?;
            (d != 0.0).then(|| n / d)
        }
        None => rate.trim().parse().ok(),
    }
}

impl SubprocessDecoder {
    pub fn new(decoder_bin: impl Into<PathBuf>, probe_bin: impl Into<PathBuf>) -> Self {
        Self { decoder_bin: decoder_bin.into(), probe_bin: probe_bin.into() }
    }

    pub fn from_env() -> Self {
        let decoder = std::env::var_os(DECODER_BIN_ENV).map(PathBuf::from).unwrap_or_else(|| "ffmpeg".into());
        let probe = std::env::var_os(PROBE_BIN_ENV).map(PathBuf::from).unwrap_or_else(|| "ffprobe".into());
        Self::new(decoder, probe)
    }

    fn spawn_err(bin: &Path, err: std::io::Error) -> MediaError {
        if err.kind() == std::io::ErrorKind::NotFound || err.kind() == std::io::ErrorKind::PermissionDenied {
            MediaError::DecoderUnavailable { bin: bin.display().to_string() }
        } else {
            MediaError::Io(err)
        }
    }

    pub(crate) fn parse_probe_json(bytes: &[u8]) -> Result<MediaInfo, MediaError> {
        let out: ProbeOutput = serde_json::from_slice(bytes)
            .map_err(|e| MediaError::UnsupportedFormat(format!("unreadable probe output: {e}")))?;
        let video = out
            .streams
            .iter()
            .find(|s| s.codec_type.as_deref() == Some("video") || (s.codec_type.is_none() && s.width.is_some()));
        let has_audio = out.streams.iter().any(|s| {
            s.codec_type.as_deref() == Some("audio") || (s.codec_type.is_none() && s.width.is_none())
        });
        let format = out.format.as_ref();
        let duration_s = format
            .and_then(|f| f.duration.as_deref())
            .and_then(|d| d.trim().parse::<f64>().ok())
            .ok_or_else(|| MediaError::UnsupportedFormat("missing duration".into()))?;
        let container_format = format.and_then(|f| f.format_name.clone()).unwrap_or_default();
        let (width, height, fps) = match video {
            Some(v) => (
                v.width.unwrap_or(0),
                v.height.unwrap_or(0),
                v.avg_frame_rate.as_deref().and_then(parse_rate).unwrap_or(0.0),
            ),
            None => (0, 0, 0.0),
        };
        MediaInfo { duration_s, fps, width, height, has_audio, container_format }.validated()
    }

    fn check_file(path: &Path) -> Result<(), MediaError> {
        let meta = std::fs::metadata(path).map_err(|_| MediaError::FileNotFound(path.to_path_buf()))?;
        if meta.len() == 0 {
            return Err(MediaError::UnsupportedFormat("zero-length file".into()));
        }
        Ok(())
    }
}

impl Decoder for SubprocessDecoder {
    fn probe(&self, path: &Path) -> Result<MediaInfo, MediaError> {
        Self::check_file(path)?;
        let output = Command::new(&self.probe_bin)
            .args([
                "-v",
                "error",
                "-show_entries",
                "format=duration,format_name:stream=codec_type,avg_frame_rate,width,height",
                "-of",
                "json",
            ])
            .arg(path)
            .output()
            .map_err(|e| Self::spawn_err(&self.probe_bin, e))?;
        if !output.status.success() {
            return Err(MediaError::UnsupportedFormat(String::from_utf8_lossy(&output.stderr).trim().to_string()));
        }
        Self::parse_probe_json(&output.stdout)
    }

    fn decode_at(&self, path: &Path, info: &MediaInfo, timestamp_s: f64) -> Result<Frame, MediaError> {
        info.check_timestamp(timestamp_s)?;
        debug!(path = %path.display(), t = timestamp_s, "decode frame");
        let output = Command::new(&self.decoder_bin)
            .arg("-ss")
            .arg(format!("{timestamp_s:.6}"))
            .arg("-i")
            .arg(path)
            .args(["-frames:v", "1", "-f", "image2pipe", "-vcodec", "ppm", "-"])
            .stdin(Stdio::null())
            .output()
            .map_err(|e| Self::spawn_err(&self.decoder_bin, e))?;
        if !output.status.success() {
            return Err(MediaError::DecoderFailure {
                status: output.status.code(),
                stderr: String::from_utf8_lossy(&output.stderr).into_owned(),
            });
        }
        let mut reader = std::io::Cursor::new(output.stdout);
        let image = read_ppm(&mut reader)?.ok_or_else(|| MediaError::DecoderFailure {
            status: output.status.code(),
            stderr: format!("no frame on stdout; {}", String::from_utf8_lossy(&output.stderr)),
        })?;
        Ok(Frame::new(timestamp_s, image))
    }

    fn analysis_frames<'a>(
        &'a self,
        path: &'a Path,
        info: &'a MediaInfo,
        analysis_fps: f64,
        long_edge: u32,
    ) -> Box<dyn Iterator<Item = Result<Frame, MediaError>> + 'a> {
        let child = Command::new(&self.decoder_bin)
            .arg("-i")
            .arg(path)
            .arg("-vf")
            .arg(format!("fps={analysis_fps}"))
            .args(["-f", "image2pipe", "-vcodec", "ppm", "-"])
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn();
        let mut child = match child {
            Ok(c) => c,
            Err(e) => return Box::new(std::iter::once(Err(Self::spawn_err(&self.decoder_bin, e)))),
        };
        let mut stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut index = 0usize;
        let mut finished = false;
        let limit = super::analysis_frame_count(info.duration_s, analysis_fps);
        Box::new(std::iter::from_fn(move || {
            if finished {
                return None;
            }
            if index >= limit {
                finished = true;
                let _ = child.kill();
                let _ = child.wait();
                return None;
            }
            match read_ppm(&mut stdout) {
                Ok(Some(img)) => {
                    let t = index as f64 / analysis_fps;
                    index += 1;
                    Some(Ok(Frame::new(t, downscale_long_edge(&img, long_edge))))
                }
                Ok(None) => {
                    finished = true;
                    let mut stderr = String::new();
                    if let Some(mut e) = child.stderr.take() {
                        let _ = e.read_to_string(&mut stderr);
                    }
                    match child.wait() {
                        Ok(status) if status.success() => None,
                        Ok(status) => Some(Err(MediaError::DecoderFailure { status: status.code(), stderr })),
                        Err(e) => Some(Err(MediaError::Io(e))),
                    }
                }
                Err(e) => {
                    finished = true;
                    let _ = child.kill();
                    let _ = child.wait();
                    Some(Err(e))
                }
            }
        }))
    }
}
