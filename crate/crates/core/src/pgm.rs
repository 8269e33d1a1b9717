//! Binary portable graymap (`P5`) reading and writing.
//!
//! Files are written as `P5\n<width> <height>\n255\n` followed by one byte per
//! pixel in row-major order, with `byte = round(clamp(v, 0, 1) * 255)`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Writes a `[1×H×W]` tensor with values in `[0, 1]`.
pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = match image.shape() {
        [1, h, w] => (*h, *w),
        s => return Err(Error::Dimension(format!("expected [1, H, W], got {s:?}"))),
    };
    let bytes: Vec<u8> = image.data().iter().map(|&v| quantize(v)).collect();
    fs::write(path, encode(w, h, &bytes))?;
    Ok(())
}

pub fn write_bytes(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Dimension(format!(
            "{} bytes for a {width}x{height} image",
            pixels.len()
        )));
    }
    fs::write(path, encode(width, height, pixels))?;
    Ok(())
}

/// Parses a `P5` buffer into `(width, height, maxval, pixels)`.
pub fn decode(buf: &[u8]) -> Result<(usize, usize, u16, &[u8])> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // skip whitespace and comments
        while pos < buf.len() {
            match buf[pos] {
                b'#' => {
                    while pos < buf.len() && buf[pos] != b'\n' {
                        pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(std::str::from_utf8(&buf[start..pos]).map_err(|_| Error::Format("non-ASCII PGM header".into()))?);
    }
    if fields[0] != "P5" {
        return Err(Error::Format(format!("bad PGM magic {:?}", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM header field {s:?}")));
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = w * h;
    if buf.len() < pos + need {
        return Err(Error::Format(format!(
            "PGM raster has {} bytes, expected {need}",
            buf.len().saturating_sub(pos)
        )));
    }
    Ok((w, h, maxval as u16, &buf[pos..pos + need]))
}

/// Reads a `P5` file into a `[1×H×W]` tensor scaled to `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let buf = fs::read(path)?;
    let (w, h, maxval, px) = decode(&buf)?;
    let scale = f64::from(maxval);
    Tensor::new(vec![1, h, w], px.iter().map(|&b| f64::from(b) / scale).collect())
}
