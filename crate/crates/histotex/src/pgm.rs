//! Binary PGM (P5) reading and writing.
//!
//! Pixels in `[0, 1]` quantize to `round(p * maxval)` with maxval 255
//! (8-bit) or 65535 (16-bit, big-endian sample order as the format
//! requires). Decoding maps back to `q / maxval`, so a save/load round
//! trip reproduces pixels within half a quantization step and a second
//! round trip is byte-exact.

use crate::error::{Error, Result};
use crate::textures::Image;
use crate::Elem;
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    fn maxval(self) -> u32 {
        match self {
            BitDepth::Eight => 255,
            BitDepth::Sixteen => 65535,
        }
    }
}

pub fn encode(image: &Image, depth: BitDepth) -> Vec<u8> {
    let maxval = depth.maxval();
    let mut out = format!("P5\n{} {}\n{}\n", image.width, image.height, maxval).into_bytes();
    match depth {
        BitDepth::Eight => {
            for &p in &image.pixels {
                out.push((p.clamp(0.0, 1.0) * maxval as Elem).round() as u8);
            }
        }
        BitDepth::Sixteen => {
            for &p in &image.pixels {
                let q = (p.clamp(0.0, 1.0) * maxval as Elem).round() as u16;
                out.extend_from_slice(&q.to_be_bytes());
            }
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0usize;
    let magic = next_token(bytes, &mut pos)?;
    if magic != b"P5" {
        return Err(Error::Format("not a binary PGM (missing P5 magic)".into()));
    }
    let width = parse_usize(next_token(bytes, &mut pos)?)?;
    let height = parse_usize(next_token(bytes, &mut pos)?)?;
    let maxval = parse_usize(next_token(bytes, &mut pos)?)?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("unsupported PGM maxval {}", maxval)));
    }
    // Exactly one whitespace byte separates the header from the samples.
    pos += 1;
    let n = width * height;
    let wide = maxval > 255;
    let needed = if wide { 2 * n } else { n };
    if bytes.len() < pos + needed {
        return Err(Error::Format(format!(
            "PGM data truncated: need {} bytes, have {}",
            needed,
            bytes.len().saturating_sub(pos)
        )));
    }
    let mut pixels = Vec::with_capacity(n);
    if wide {
        for i in 0..n {
            let q = u16::from_be_bytes([bytes[pos + 2 * i], bytes[pos + 2 * i + 1]]);
            pixels.push(q as Elem / maxval as Elem);
        }
    } else {
        for i in 0..n {
            pixels.push(bytes[pos + i] as Elem / maxval as Elem);
        }
    }
    Image::new(height, width, pixels)
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    // Skip whitespace and '#' comments.
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Format("truncated PGM header".into()));
    }
    Ok(&bytes[start..*pos - 0])
}

fn parse_usize(token: &[u8]) -> Result<usize> {
    std::str::from_utf8(token)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("bad integer in PGM header".into()))
}

pub fn write_pgm(path: &Path, image: &Image, depth: BitDepth) -> Result<()> {
    fs::write(path, encode(image, depth))?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {}", path.display(), msg)),
        other => other,
    })
}
