//! Synthetic "healthy" slices with optional injected blob anomalies.
//!
//! Healthy slices are a soft-edged ellipse (the "head") carrying 3-6 smooth
//! ellipsoidal intensity bumps plus low-amplitude smooth noise. Anomalies
//! are single discs whose intensity is raised by a fixed number of the
//! patient's pooled standard deviations.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::format::{write_mask, write_slice};
use super::grid::{Image, Mask};
use super::manifest::{DatasetManifest, ManifestEntry, Split};
use crate::error::{invalid, CevaeError, Result};
use crate::rng::{stream, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    /// Number of test patients (the only split that receives anomalies).
    pub n_patients: usize,
    pub n_train_patients: usize,
    pub n_val_patients: usize,
    pub slices_per_patient: usize,
    pub anomaly_fraction: f64,
    /// Disc intensity offset in units of the patient's pooled std.
    pub anomaly_intensity_shift: f64,
    pub anomaly_radius_range: (usize, usize),
    pub resolution: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            n_patients: 10,
            n_train_patients: 40,
            n_val_patients: 4,
            slices_per_patient: 32,
            anomaly_fraction: 0.5,
            anomaly_intensity_shift: 3.0,
            anomaly_radius_range: (4, 10),
            resolution: 64,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 {
            return invalid("phantom resolution must be >= 8");
        }
        if self.slices_per_patient == 0 {
            return invalid("slices_per_patient must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.anomaly_fraction) {
            return invalid("anomaly_fraction must lie in [0, 1]");
        }
        let (lo, hi) = self.anomaly_radius_range;
        if lo < 1 || hi < lo || 2 * hi >= self.resolution {
            return invalid(format!(
                "anomaly_radius_range ({lo}, {hi}) must satisfy 1 <= min <= max < resolution/2"
            ));
        }
        if !self.anomaly_intensity_shift.is_finite() {
            return invalid("anomaly_intensity_shift must be finite");
        }
        Ok(())
    }

    /// Anomalous slices per test patient.
    pub fn anomalous_per_patient(&self) -> usize {
        (self.anomaly_fraction * self.slices_per_patient as f64).round() as usize
    }
}

/// One generated patient before it is written to disk.
#[derive(Debug, Clone)]
pub struct PhantomPatient {
    pub patient_id: String,
    pub split: Split,
    pub slices: Vec<Image>,
    pub masks: Vec<Option<Mask>>,
}

struct Head {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
}

fn head_weight(head: &Head, scale: f64, u: f64, v: f64) -> f64 {
    let r = (((u - head.cx) / (head.ax * scale)).powi(2)
        + ((v - head.cy) / (head.ay * scale)).powi(2))
    .sqrt();
    1.0 / (1.0 + ((r - 1.0) / 0.03).exp())
}

fn coord(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64 * 2.0 - 1.0
}

fn healthy_slice(rng: &mut Rng, head: &Head, scale: f64, res: usize) -> Image {
    struct Bump {
        cx: f64,
        cy: f64,
        sx: f64,
        sy: f64,
        cos: f64,
        sin: f64,
        amp: f64,
    }
    let n_bumps = rng.random_range(3..=6);
    let bumps: Vec<Bump> = (0..n_bumps)
        .map(|_| {
            let theta = rng.random_range(0.0..PI);
            let amp_mag = rng.random_range(0.25..0.6);
            Bump {
                cx: head.cx + rng.random_range(-0.45..0.45) * head.ax * scale,
                cy: head.cy + rng.random_range(-0.45..0.45) * head.ay * scale,
                sx: rng.random_range(0.08..0.3) * scale,
                sy: rng.random_range(0.08..0.3) * scale,
                cos: theta.cos(),
                sin: theta.sin(),
                amp: if rng.random_bool(0.5) { amp_mag } else { -amp_mag },
            }
        })
        .collect();
    // smooth noise: coarse 8x8 gaussian grid, bilinearly upsampled
    const G: usize = 8;
    let noise: Vec<f64> = (0..G * G)
        .map(|_| 0.04 * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect();
    let noise_at = |u: f64, v: f64| {
        let gx = ((u + 1.0) / 2.0 * (G - 1) as f64).clamp(0.0, (G - 1) as f64);
        let gy = ((v + 1.0) / 2.0 * (G - 1) as f64).clamp(0.0, (G - 1) as f64);
        let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(G - 1), (y0 + 1).min(G - 1));
        let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
        let top = noise[y0 * G + x0] * (1.0 - fx) + noise[y0 * G + x1] * fx;
        let bot = noise[y1 * G + x0] * (1.0 - fx) + noise[y1 * G + x1] * fx;
        top * (1.0 - fy) + bot * fy
    };
    Image::from_fn(res, res, |r, c| {
        let (u, v) = (coord(c, res), coord(r, res));
        let wgt = head_weight(head, scale, u, v);
        let mut val = 1.0 + noise_at(u, v);
        for b in &bumps {
            let dx = u - b.cx;
            let dy = v - b.cy;
            let rx = dx * b.cos + dy * b.sin;
            let ry = -dx * b.sin + dy * b.cos;
            val += b.amp * (-0.5 * (rx * rx / (b.sx * b.sx) + ry * ry / (b.sy * b.sy))).exp();
        }
        (wgt * val) as f32
    })
}

fn pooled_std(slices: &[Image]) -> f64 {
    let n: usize = slices.iter().map(Image::len).sum();
    let mean = slices
        .iter()
        .flat_map(|s| s.as_slice())
        .map(|&v| v as f64)
        .sum::<f64>()
        / n as f64;
    (slices
        .iter()
        .flat_map(|s| s.as_slice())
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64)
        .sqrt()
}

/// Disc placed inside the head so the lesion sits in "tissue".
fn inject_anomaly(
    rng: &mut Rng,
    image: &mut Image,
    head: &Head,
    scale: f64,
    radius_range: (usize, usize),
    offset: f64,
) -> Mask {
    let res = image.height();
    let radius = rng.random_range(radius_range.0..=radius_range.1) as f64;
    let lo = radius.ceil() as usize;
    let hi = res - 1 - lo;
    // rejection sample a centre inside the head; fall back to the head centre
    let mut centre = None;
    for _ in 0..256 {
        let cy = rng.random_range(lo..=hi);
        let cx = rng.random_range(lo..=hi);
        if head_weight(head, scale * 0.85, coord(cx, res), coord(cy, res)) > 0.5 {
            centre = Some((cy, cx));
            break;
        }
    }
    let (cy, cx) = centre.unwrap_or_else(|| {
        let to_px = |t: f64| (((t + 1.0) / 2.0 * res as f64) as usize).clamp(lo, hi);
        (to_px(head.cy), to_px(head.cx))
    });
    let mask = Mask::from_fn(res, res, |r, c| {
        let d2 = (r as f64 - cy as f64).powi(2) + (c as f64 - cx as f64).powi(2);
        u8::from(d2 <= radius * radius)
    });
    for (px, &m) in image.as_mut_slice().iter_mut().zip(mask.as_slice()) {
        if m != 0 {
            *px = (*px as f64 + offset) as f32;
        }
    }
    mask
}

fn patient_id(split: Split, index: usize) -> String {
    format!("{}-{index:03}", split.as_str())
}

/// Generates one patient purely from `(cfg.seed, split, index)`.
pub fn generate_patient(cfg: &PhantomConfig, split: Split, index: usize) -> PhantomPatient {
    let pid = patient_id(split, index);
    let mut rng = stream(cfg.seed, &[b"phantom", pid.as_bytes()]);
    let head = Head {
        cx: rng.random_range(-0.06..0.06),
        cy: rng.random_range(-0.06..0.06),
        ax: rng.random_range(0.65..0.82),
        ay: rng.random_range(0.75..0.9),
    };
    let n = cfg.slices_per_patient;
    let scales: Vec<f64> = (0..n)
        .map(|i| 0.7 + 0.3 * (PI * (i as f64 + 0.5) / n as f64).sin())
        .collect();
    let mut slices: Vec<Image> = scales
        .iter()
        .map(|&s| healthy_slice(&mut rng, &head, s, cfg.resolution))
        .collect();
    let mut masks = vec![None; n];
    if split == Split::Test {
        let k = cfg.anomalous_per_patient().min(n);
        let chosen = rand::seq::index::sample(&mut rng, n, k).into_vec();
        let offset = cfg.anomaly_intensity_shift * pooled_std(&slices);
        for i in chosen {
            masks[i] = Some(inject_anomaly(
                &mut rng,
                &mut slices[i],
                &head,
                scales[i],
                cfg.anomaly_radius_range,
                offset,
            ));
        }
    }
    PhantomPatient {
        patient_id: pid,
        split,
        slices,
        masks,
    }
}

/// Generates all splits in memory. Parallel over patients; each patient
/// owns its own random stream, so the result does not depend on scheduling.
pub fn generate_patients(cfg: &PhantomConfig) -> Result<Vec<PhantomPatient>> {
    cfg.validate()?;
    let jobs: Vec<(Split, usize)> = [
        (Split::Train, cfg.n_train_patients),
        (Split::Val, cfg.n_val_patients),
        (Split::Test, cfg.n_patients),
    ]
    .into_iter()
    .flat_map(|(s, n)| (0..n).map(move |i| (s, i)))
    .collect();
    Ok(jobs
        .into_par_iter()
        .map(|(s, i)| generate_patient(cfg, s, i))
        .collect())
}

/// Writes the phantom dataset under `out_dir` and returns its manifest
/// (also written to `out_dir/manifest.csv`).
pub fn generate_phantoms(cfg: &PhantomConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let patients = generate_patients(cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| CevaeError::io(out_dir, e))?;
    let mut entries = Vec::new();
    for p in &patients {
        for (i, (img, mask)) in p.slices.iter().zip(&p.masks).enumerate() {
            let slice_rel = PathBuf::from("slices").join(format!("{}_{i:03}.cevs", p.patient_id));
            write_slice(out_dir.join(&slice_rel), img)?;
            let mask_rel = match mask {
                Some(m) => {
                    let rel = PathBuf::from("masks").join(format!("{}_{i:03}.cevs", p.patient_id));
                    write_mask(out_dir.join(&rel), m)?;
                    Some(rel)
                }
                None => None,
            };
            entries.push(ManifestEntry {
                patient_id: p.patient_id.clone(),
                slice_path: slice_rel,
                mask_path: mask_rel,
                split: p.split,
            });
        }
    }
    let mut manifest = DatasetManifest::new(entries, out_dir);
    manifest.resolution = cfg.resolution;
    manifest.write(out_dir.join("manifest.csv"))?;
    std::fs::write(
        out_dir.join("phantom_config.json"),
        serde_json::to_string_pretty(cfg)?,
    )
    .map_err(|e| CevaeError::io(out_dir, e))?;
    Ok(manifest)
}
