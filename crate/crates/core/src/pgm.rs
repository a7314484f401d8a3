//! Binary greyscale PGM (P5, maxval 255) reading and writing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::render::Frame;

/// Maps `[0, 1]` to a byte with `round(v * 255)`.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn from_byte(b: u8) -> f64 {
    b as f64 / 255.0
}

pub fn encode(frame: &Frame) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend(frame.data.iter().map(|&v| to_byte(v)));
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Frame, String> {
    let mut pos = 0usize;
    let next_token = |pos: &mut usize| -> std::result::Result<String, String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
            *pos += 1;
        }
        if start == *pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = next_token(&mut pos)?;
    if magic != "P5" {
        return Err(format!("unsupported magic '{magic}'"));
    }
    let num = |pos: &mut usize, what: &str| -> std::result::Result<usize, String> {
        next_token(pos)?
            .parse::<usize>()
            .map_err(|e| format!("bad {what}: {e}"))
    };
    let width = num(&mut pos, "width")?;
    let height = num(&mut pos, "height")?;
    let maxval = num(&mut pos, "maxval")?;
    if maxval != 255 {
        return Err(format!("only maxval 255 is supported, got {maxval}"));
    }
    // exactly one whitespace byte separates header and raster
    pos += 1;
    let n = width * height;
    if bytes.len() < pos + n {
        return Err(format!("raster truncated: need {n} bytes, have {}", bytes.len().saturating_sub(pos)));
    }
    let data = bytes[pos..pos + n].iter().map(|&b| from_byte(b)).collect();
    Ok(Frame { height, width, data })
}

pub fn write(path: &Path, frame: &Frame) -> Result<()> {
    std::fs::write(path, encode(frame)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Frame> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|d| Error::format(path, d))
}
