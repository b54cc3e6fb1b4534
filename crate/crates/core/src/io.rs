//! Small file-format helpers: atomic writes and PGM images.

use std::fs;
use std::path::Path;

use crate::error::Result;

/// Write via a sibling temp file and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Binary 8-bit PGM (P5), row-major `height x width`.
pub fn pgm8(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Binary 16-bit PGM (P5, maxval 65535, big-endian samples).
pub fn pgm16(width: usize, height: usize, pixels: &[u16]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for p in pixels {
        out.extend_from_slice(&p.to_be_bytes());
    }
    out
}

/// Linearly map `values` onto 0..=255 using `[lo, hi]`; a flat range maps to 0.
pub fn to_gray(values: &[f64], lo: f64, hi: f64) -> Vec<u8> {
    let span = hi - lo;
    values
        .iter()
        .map(|&v| {
            if span <= 0.0 || !v.is_finite() {
                0
            } else {
                (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8
            }
        })
        .collect()
}

/// Scale to 0..=255 by the maximum value (zero image stays black).
pub fn to_gray_max(values: &[f64]) -> Vec<u8> {
    let hi = values.iter().copied().fold(0.0, f64::max);
    to_gray(values, 0.0, hi)
}

/// Boolean mask as 0/255 PGM bytes.
pub fn mask_pgm(width: usize, height: usize, mask: &[bool]) -> Vec<u8> {
    let px: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    pgm8(width, height, &px)
}

/// Parse a P5 PGM written by [`pgm8`] or [`pgm16`]: `(width, height, maxval, samples)`.
pub fn read_pgm(bytes: &[u8]) -> Option<(usize, usize, u32, Vec<u32>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?.to_string());
    }
    pos += 1;
    if fields[0] != "P5" {
        return None;
    }
    let w: usize = fields[1].parse().ok()?;
    let h: usize = fields[2].parse().ok()?;
    let maxval: u32 = fields[3].parse().ok()?;
    let body = &bytes[pos..];
    let samples = if maxval < 256 {
        body.iter().take(w * h).map(|&b| b as u32).collect::<Vec<_>>()
    } else {
        body.chunks(2).take(w * h).map(|c| u16::from_be_bytes([c[0], c[1]]) as u32).collect()
    };
    (samples.len() == w * h).then_some((w, h, maxval, samples))
}
