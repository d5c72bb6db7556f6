//! `HH:MM:SS` timestamps as they appear in prompts, model output and WebVTT.

use std::fmt::Write;

/// Renders seconds as `HH:MM:SS`, with a `.mmm` suffix only when the value
/// is not a whole number of milliseconds-rounded seconds.
pub fn format_hms(seconds: f64) -> String {
    let total_ms = (seconds.max(0.0) * 1000.0).round() as u64;
    let (h, m, s, ms) = split_ms(total_ms);
    let mut out = format!("{h:02}:{m:02}:{s:02}");
    if ms != 0 {
        let _ = write!(out, ".{ms:03}");
    }
    out
}

/// WebVTT cue timing, always with milliseconds: `HH:MM:SS.mmm`.
pub fn format_vtt(seconds: f64) -> String {
    let total_ms = (seconds.max(0.0) * 1000.0).round() as u64;
    let (h, m, s, ms) = split_ms(total_ms);
    format!("{h:02}:{m:02}:{s:02}.{ms:03}")
}

fn split_ms(total_ms: u64) -> (u64, u64, u64, u64) {
    let ms = total_ms % 1000;
    let total_s = total_ms / 1000;
    (total_s / 3600, (total_s % 3600) / 60, total_s % 60, ms)
}

/// Parses `HH:MM:SS` or `HH:MM:SS.fff`. Also accepts `MM:SS` since models
/// occasionally drop the hour field for short videos.
pub fn parse_hms(text: &str) -> Option<f64> {
    let text = text.trim();
    let parts: Vec<&str> = text.split(':').collect();
    let (h, m, s) = match parts.as_slice() {
        [h, m, s] => (*h, *m, *s),
        [m, s] => ("0", *m, *s),
        _ => return None,
    };
    let h: u64 = h.parse().ok()?;
    let m: u64 = m.parse().ok()?;
    if m >= 60 || !s.chars().all(|c| c.is_ascii_digit() || c == '.') || s.is_empty() {
        return None;
    }
    let s: f64 = s.parse().ok()?;
    if !(0.0..60.0).contains(&s) {
        return None;
    }
    Some(h as f64 * 3600.0 + m as f64 * 60.0 + s)
}
