//! Input perturbations: context-encoding square masks, additive Gaussian
//! noise (denoising baseline) and training-time augmentation.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{invalid, Result};
use crate::rng::Rng;

/// One masked square; `height == width` always.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub fill_value: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub rects: Vec<MaskRect>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillMode {
    /// One value per square, drawn from the batch's pixels.
    #[default]
    PerSquare,
    /// Every masked pixel draws its own value from the batch's pixels.
    PerPixel,
}

impl MaskSpec {
    pub fn validate(&self, shape: (usize, usize)) -> Result<()> {
        if self.rects.is_empty() || self.rects.len() > 3 {
            return invalid(format!("mask spec must hold 1-3 squares, got {}", self.rects.len()));
        }
        for r in &self.rects {
            if r.height != r.width || r.height == 0 {
                return invalid(format!("mask rect {r:?} is not a non-empty square"));
            }
            if r.top + r.height > shape.0 || r.left + r.width > shape.1 {
                return invalid(format!("mask rect {r:?} exceeds image bounds {shape:?}"));
            }
        }
        Ok(())
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.rects.iter().any(|r| {
            row >= r.top && row < r.top + r.height && col >= r.left && col < r.left + r.width
        })
    }
}

/// Draws 1-3 squares with side in `[res/8, res/2]`, positioned uniformly
/// inside the image, each filled with a value drawn from `batch_pixels`.
pub fn sample_mask_spec(
    rng: &mut Rng,
    shape: (usize, usize),
    batch_pixels: &[f32],
) -> Result<MaskSpec> {
    if batch_pixels.is_empty() {
        return invalid("batch_pixels must be nonempty");
    }
    let res = shape.0.min(shape.1);
    let min_side = (res / 8).max(1);
    let max_side = (res / 2).max(min_side);
    let count = rng.random_range(1..=3usize);
    let rects = (0..count)
        .map(|_| {
            let side = rng.random_range(min_side..=max_side);
            let top = rng.random_range(0..=shape.0 - side);
            let left = rng.random_range(0..=shape.1 - side);
            let fill_value = batch_pixels[rng.random_range(0..batch_pixels.len())];
            MaskRect {
                top,
                left,
                height: side,
                width: side,
                fill_value,
            }
        })
        .collect();
    Ok(MaskSpec { rects })
}

/// Paints each rect with its fill value, in list order (later rects win
/// on overlap).
pub fn apply_mask(image: &Image, spec: &MaskSpec) -> Result<Image> {
    spec.validate(image.shape())?;
    let mut out = image.clone();
    for r in &spec.rects {
        for row in r.top..r.top + r.height {
            for col in r.left..r.left + r.width {
                out.set(row, col, r.fill_value);
            }
        }
    }
    Ok(out)
}

/// Like [`apply_mask`] but every covered pixel gets an independent draw
/// from `batch_pixels`.
pub fn apply_mask_per_pixel(
    image: &Image,
    spec: &MaskSpec,
    batch_pixels: &[f32],
    rng: &mut Rng,
) -> Result<Image> {
    spec.validate(image.shape())?;
    if batch_pixels.is_empty() {
        return invalid("batch_pixels must be nonempty");
    }
    let mut out = image.clone();
    for r in &spec.rects {
        for row in r.top..r.top + r.height {
            for col in r.left..r.left + r.width {
                out.set(row, col, batch_pixels[rng.random_range(0..batch_pixels.len())]);
            }
        }
    }
    Ok(out)
}

/// Samples a mask and applies it with the chosen fill mode.
pub fn context_corrupt(
    image: &Image,
    batch_pixels: &[f32],
    fill: FillMode,
    rng: &mut Rng,
) -> Result<Image> {
    let spec = sample_mask_spec(rng, image.shape(), batch_pixels)?;
    match fill {
        FillMode::PerSquare => apply_mask(image, &spec),
        FillMode::PerPixel => apply_mask_per_pixel(image, &spec, batch_pixels, rng),
    }
}

/// `image + N(0, sigma^2)` per pixel.
pub fn gaussian_corrupt(image: &Image, sigma: f64, rng: &mut Rng) -> Result<Image> {
    if !(sigma >= 0.0) {
        return invalid(format!("sigma must be >= 0, got {sigma}"));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    Ok(image.map(|v| (v as f64 + normal.sample(rng)) as f32))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub mirror: bool,
    pub rotation_degrees: f64,
    pub brightness_factor: f64,
}

impl AugmentSpec {
    pub const IDENTITY: AugmentSpec = AugmentSpec {
        mirror: false,
        rotation_degrees: 0.0,
        brightness_factor: 1.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub mirror_prob: f64,
    pub rotation_range: (f64, f64),
    pub brightness_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            mirror_prob: 0.5,
            rotation_range: (-15.0, 15.0),
            brightness_range: (0.9, 1.1),
        }
    }
}

pub fn sample_augment(rng: &mut Rng, cfg: &AugmentConfig) -> AugmentSpec {
    let uniform = |rng: &mut Rng, (lo, hi): (f64, f64)| {
        if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        }
    };
    AugmentSpec {
        mirror: rng.random_bool(cfg.mirror_prob.clamp(0.0, 1.0)),
        rotation_degrees: uniform(rng, cfg.rotation_range),
        brightness_factor: uniform(rng, cfg.brightness_range),
    }
}

/// Horizontal mirror, then rotation about the centre (bilinear, zero
/// outside), then multiplicative brightness.
pub fn augment(image: &Image, spec: &AugmentSpec) -> Image {
    let (h, w) = image.shape();
    let mut out = if spec.mirror {
        Image::from_fn(h, w, |r, c| image.get(r, w - 1 - c))
    } else {
        image.clone()
    };
    if spec.rotation_degrees != 0.0 {
        out = rotate(&out, spec.rotation_degrees);
    }
    if spec.brightness_factor != 1.0 {
        let f = spec.brightness_factor;
        out = out.map(|v| (v as f64 * f) as f32);
    }
    out
}

fn rotate(image: &Image, degrees: f64) -> Image {
    let (h, w) = image.shape();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let sample = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            image.get(y as usize, x as usize) as f64
        }
    };
    Image::from_fn(h, w, |r, c| {
        // inverse map: output pixel -> source location
        let dy = r as f64 - cy;
        let dx = c as f64 - cx;
        let sx = cos * dx + sin * dy + cx;
        let sy = -sin * dx + cos * dy + cy;
        let (x0, y0) = (sx.floor(), sy.floor());
        let (fx, fy) = (sx - x0, sy - y0);
        let (x0, y0) = (x0 as isize, y0 as isize);
        let top = sample(y0, x0) * (1.0 - fx) + sample(y0, x0 + 1) * fx;
        let bot = sample(y0 + 1, x0) * (1.0 - fx) + sample(y0 + 1, x0 + 1) * fx;
        (top * (1.0 - fy) + bot * fy) as f32
    })
}
