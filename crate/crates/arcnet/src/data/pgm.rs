//! Minimal binary PGM (P5) reader/writer for the 8-bit grayscale frames.
//!
//! The writer always emits `P5\n<width> <height>\n255\n` followed by
//! row-major bytes, so frames are bit-exact on a round trip. The reader
//! tolerates comments and arbitrary whitespace in the header but requires an
//! 8-bit maxval.

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Shape(format!(
            "pgm: {} pixels for {}x{}",
            pixels.len(),
            width,
            height
        )));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let header = format!("P5\n{width} {height}\n255\n");
    f.write_all(header.as_bytes())
        .and_then(|_| f.write_all(pixels))
        .map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::format(
            path,
            1,
            "not a binary PGM (missing P5 magic)",
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3]; // width, height, maxval
    for field in &mut fields {
        // Skip whitespace and comment lines.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, 1, "malformed PGM header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, 1, "malformed PGM header"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(
            path,
            1,
            format!("unsupported PGM maxval {maxval} (expected 255)"),
        ));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    if bytes.len() < pos + width * height {
        return Err(Error::format(
            path,
            1,
            format!(
                "truncated PGM: {} raster bytes for {}x{}",
                bytes.len().saturating_sub(pos),
                width,
                height
            ),
        ));
    }
    Ok((width, height, bytes[pos..pos + width * height].to_vec()))
}
