//! Grayscale heatmaps for score, influence, importance and transition maps.

use std::path::Path;

use crate::binio::write_atomic;
use crate::error::{Error, Result};
use crate::netpbm::encode_gray;

/// Min-max normalizes to 0..=255 with rounding; a constant input maps to 0.
pub fn heatmap_bytes(values: &[f64]) -> Result<Vec<u8>> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("heatmap values".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    Ok(values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect())
}

/// Row-major `height x width` values as a P5 file image.
pub fn encode_heatmap(height: usize, width: usize, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != height * width || values.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} heatmap values for a {height}x{width} grid",
            values.len()
        )));
    }
    Ok(encode_gray(height, width, &heatmap_bytes(values)?))
}

pub fn write_heatmap(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    write_atomic(path, &encode_heatmap(height, width, values)?)
}
