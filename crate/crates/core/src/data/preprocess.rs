use serde::{Deserialize, Serialize};

use super::grid::{Image, Mask};
use crate::error::{invalid, CevaeError, Result};

/// Whether patient-wise z-scoring happens before or after resampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreprocessOrder {
    #[default]
    NormalizeFirst,
    ResampleFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub resolution: usize,
    pub order: PreprocessOrder,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            resolution: 64,
            order: PreprocessOrder::NormalizeFirst,
        }
    }
}

/// Pooled z-score over every pixel of every slice of one patient.
pub fn zscore_normalize(patient_id: &str, slices: &[Image]) -> Result<Vec<Image>> {
    let n: usize = slices.iter().map(Image::len).sum();
    if n == 0 {
        return Err(CevaeError::DegenerateInput {
            patient: patient_id.to_string(),
            reason: "no pixels".into(),
        });
    }
    let mean = slices
        .iter()
        .flat_map(|s| s.as_slice())
        .map(|&v| v as f64)
        .sum::<f64>()
        / n as f64;
    let var = slices
        .iter()
        .flat_map(|s| s.as_slice())
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt();
    if !(std > 0.0) || !std.is_finite() {
        return Err(CevaeError::DegenerateInput {
            patient: patient_id.to_string(),
            reason: format!("pooled standard deviation is {std}"),
        });
    }
    Ok(slices
        .iter()
        .map(|s| s.map(|v| ((v as f64 - mean) / std) as f32))
        .collect())
}

/// Bilinear resampling with half-pixel-centre alignment and edge clamping.
pub fn resample(image: &Image, target: usize) -> Result<Image> {
    if target < 8 {
        return invalid(format!("resample target must be >= 8, got {target}"));
    }
    let (h, w) = image.shape();
    if h == 0 || w == 0 {
        return invalid("cannot resample an empty image");
    }
    if h == target && w == target {
        return Ok(image.clone());
    }
    let sy = h as f64 / target as f64;
    let sx = w as f64 / target as f64;
    let axis = |d: usize, scale: f64, n: usize| -> (usize, usize, f64) {
        let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f64)
    };
    Ok(Image::from_fn(target, target, |r, c| {
        let (y0, y1, fy) = axis(r, sy, h);
        let (x0, x1, fx) = axis(c, sx, w);
        let top = image.get(y0, x0) as f64 * (1.0 - fx) + image.get(y0, x1) as f64 * fx;
        let bot = image.get(y1, x0) as f64 * (1.0 - fx) + image.get(y1, x1) as f64 * fx;
        (top * (1.0 - fy) + bot * fy) as f32
    }))
}

/// Nearest-neighbour resampling for annotations.
pub fn resample_mask(mask: &Mask, target: usize) -> Result<Mask> {
    if target == 0 {
        return invalid("resample target must be positive");
    }
    let (h, w) = mask.shape();
    if h == target && w == target {
        return Ok(mask.clone());
    }
    Ok(Mask::from_fn(target, target, |r, c| {
        let sr = (((r as f64 + 0.5) * h as f64 / target as f64) as usize).min(h - 1);
        let sc = (((c as f64 + 0.5) * w as f64 / target as f64) as usize).min(w - 1);
        mask.get(sr, sc)
    }))
}
