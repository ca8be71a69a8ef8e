//! Binary PGM (P5) slice exports for qualitative panels.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Write a row-major grayscale image, mapping [lo, hi] linearly onto
/// 0..=255 with clamping. `lo == hi` renders mid-gray.
pub fn write_pgm(
    path: &Path,
    width: usize,
    height: usize,
    data: &[f32],
    lo: f32,
    hi: f32,
) -> Result<()> {
    if data.len() != width * height {
        return Err(Error::Invalid(format!(
            "pgm {}x{} wants {} pixels, got {}",
            width,
            height,
            width * height,
            data.len()
        )));
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    let span = hi - lo;
    for &v in data {
        let g = if span > 0.0 {
            ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            128
        };
        bytes.push(g);
    }
    fs::write(path, bytes).map_err(Error::from)
}
