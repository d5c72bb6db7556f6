//! Stand-in for `ffprobe`/`ffmpeg` over `.vsyn` synthetic videos.
//!
//! Accepts the same argument shapes the subprocess decoder issues:
//!
//!   vidscript-synthdec -v error -show_entries ... -of json <path>
//!   vidscript-synthdec -ss <t> -i <path> -frames:v 1 -f image2pipe -vcodec ppm -
//!   vidscript-synthdec -i <path> -vf fps=<F> -f image2pipe -vcodec ppm -
//!
//! `vidscript-synthdec --demo <path>` writes the bundled 60 s demo video.

use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use serde_json::json;
use vidscript_core::media::{write_ppm, SyntheticVideo};

fn value_after<'a>(args: &'a [String], flag: &str) -> Option<&'a str> {
    args.iter().position(|a| a == flag).and_then(|i| args.get(i + 1)).map(String::as_str)
}

fn probe(args: &[String]) -> Result<(), String> {
    let path = PathBuf::from(args.last().ok_or("missing input")?);
    let video = SyntheticVideo::load(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut streams = vec![json!({
        "codec_type": "video",
        "width": video.width,
        "height": video.height,
        "avg_frame_rate": format!("{}/1", video.fps),
    })];
    if video.has_audio {
        streams.push(json!({"codec_type": "audio", "avg_frame_rate": "0/0"}));
    }
    let doc = json!({
        "programs": [],
        "streams": streams,
        "format": {"duration": format!("{:.6}", video.duration_s), "format_name": "vsyn"},
    });
    println!("{}", serde_json::to_string_pretty(&doc).unwrap());
    Ok(())
}

fn decode(args: &[String]) -> Result<(), String> {
    let path = PathBuf::from(value_after(args, "-i").ok_or("missing -i")?);
    let video = SyntheticVideo::load(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let stdout = std::io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    if let Some(filter) = value_after(args, "-vf") {
        let fps: f64 = filter
            .strip_prefix("fps=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| format!("unsupported filter {filter}"))?;
        let mut k = 0u64;
        loop {
            let t = k as f64 / fps;
            if t >= video.duration_s {
                break;
            }
            let shown = video.frame_index(t) as f64 / video.fps;
            let frame = video.render(shown, video.width, video.height);
            if write_ppm(&mut out, &frame).is_err() {
                // reader hung up
                return Ok(());
            }
            k += 1;
        }
    } else {
        let t: f64 = value_after(args, "-ss").unwrap_or("0").parse().map_err(|_| "bad -ss value")?;
        if t < 0.0 || t > video.duration_s {
            return Err(format!("seek {t} beyond end of stream"));
        }
        let shown = video.frame_index(t) as f64 / video.fps;
        let frame = video.render(shown, video.width, video.height);
        write_ppm(&mut out, &frame).map_err(|e| e.to_string())?;
    }
    out.flush().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let result = if let Some(out) = value_after(&args, "--demo") {
        SyntheticVideo::demo_60s().write(out.as_ref()).map_err(|e| format!("{out}: {e}"))
    } else if args.iter().any(|a| a == "-show_entries") {
        probe(&args)
    } else {
        decode(&args)
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
    }
}
