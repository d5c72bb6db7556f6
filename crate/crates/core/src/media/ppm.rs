//! Binary PPM (P6) as produced by `-f image2pipe -vcodec ppm`.

use std::io::{BufRead, Write};

use image::RgbImage;

use super::MediaError;

/// Reads one P6 image. Returns `Ok(None)` on a clean end of stream so that
/// a pipe of concatenated frames can be consumed in a loop.
pub fn read_ppm<R: BufRead>(reader: &mut R) -> Result<Option<RgbImage>, MediaError> {
    let mut fields: Vec<String> = Vec::with_capacity(4);
    let mut token = String::new();
    let mut in_comment = false;
    let mut started = false;
    // the header is four whitespace-separated tokens; exactly one whitespace
    // byte follows the last one before the raster
    while fields.len() < 4 {
        let mut byte = [0u8; 1];
        let n = reader.read(&mut byte)?;
        if n == 0 {
            if !started {
                return Ok(None);
            }
            return Err(MediaError::MalformedPpm("truncated header".into()));
        }
        started = true;
        let b = byte[0];
        if in_comment {
            if b == b'\n' || b == b'\r' {
                in_comment = false;
            }
            continue;
        }
        if b == b'#' && token.is_empty() {
            in_comment = true;
        } else if b.is_ascii_whitespace() {
            if !token.is_empty() {
                fields.push(std::mem::take(&mut token));
            }
        } else {
            token.push(b as char);
            if token.len() > 16 {
                return Err(MediaError::MalformedPpm("header token too long".into()));
            }
        }
    }
    if fields[0] != "P6" {
        return Err(MediaError::MalformedPpm(format!("bad magic {:?}", fields[0])));
    }
    let parse = |s: &str, what: &str| -> Result<u32, MediaError> {
        s.parse::<u32>()
            .map_err(|_| MediaError::MalformedPpm(format!("bad {what} {s:?}")))
    };
    let width = parse(&fields[1], "width")?;
    let height = parse(&fields[2], "height")?;
    let maxval = parse(&fields[3], "maxval")?;
    if maxval != 255 {
        return Err(MediaError::MalformedPpm(format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(MediaError::MalformedPpm("zero dimension".into()));
    }
    let mut raster = vec![0u8; width as usize * height as usize * 3];
    reader
        .read_exact(&mut raster)
        .map_err(|_| MediaError::MalformedPpm("truncated raster".into()))?;
    RgbImage::from_raw(width, height, raster)
        .map(Some)
        .ok_or_else(|| MediaError::MalformedPpm("raster size mismatch".into()))
}

pub fn write_ppm<W: Write>(out: &mut W, image: &RgbImage) -> std::io::Result<()> {
    write!(out, "P6\n{} {}\n255\n", image.width(), image.height())?;
    out.write_all(image.as_raw())
}
