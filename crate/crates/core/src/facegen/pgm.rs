//! Binary portable graymap (P5, maxval 255) IO.

use std::fs;
use std::path::Path;

use crate::error::{DemeshError, Result};
use crate::tensor::Tensor;

/// Encodes a `[1, H, W]` image in `[0, 1]`; values are rounded to the
/// nearest byte level.
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.chw("write_pgm")?;
    if c != 1 {
        return Err(DemeshError::invalid("write_pgm", format!("expected one channel, got {c}")));
    }
    image.ensure_finite("write_pgm")?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |msg: &str| DemeshError::format(path, msg);
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(&bytes[start..pos]);
    }
    if fields[0] != b"P5" {
        return Err(bad("not a binary graymap (missing P5 magic)"));
    }
    let num = |f: &[u8]| -> Result<usize> {
        std::str::from_utf8(f)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header number"))
    };
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad(&format!("maxval {maxval} unsupported, expected 255")));
    }
    // exactly one whitespace byte separates the header from the raster
    let raster = bytes.get(pos + 1..).ok_or_else(|| bad("missing raster"))?;
    if raster.len() != w * h {
        return Err(bad(&format!("raster holds {} bytes, expected {}", raster.len(), w * h)));
    }
    Tensor::new(vec![1, h, w], raster.iter().map(|&b| f64::from(b) / 255.0).collect())
}

pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode_pgm(image)?).map_err(|e| DemeshError::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| DemeshError::io(path, e))?;
    decode_pgm(&bytes, path)
}
