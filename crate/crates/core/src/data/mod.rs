//! Slice datasets: binary slice files, CSV manifests, preprocessing and
//! the synthetic phantom generator.

pub mod format;
mod grid;
pub mod manifest;
pub mod phantom;
pub mod preprocess;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use format::{read_mask, read_slice, write_mask, write_slice};
pub use grid::{Grid, Image, Mask};
pub use manifest::{load_manifest, DatasetManifest, ManifestEntry, Normalization, Split};
pub use phantom::{generate_phantoms, PhantomConfig};
pub use preprocess::{resample, resample_mask, zscore_normalize, PreprocessConfig, PreprocessOrder};

use crate::error::{CevaeError, Result};

/// One preprocessed 2D slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceSample {
    pub patient_id: String,
    /// Position of the slice within its patient, in manifest order.
    pub slice_index: usize,
    pub image: Image,
    pub mask: Option<Mask>,
    pub split: Split,
}

impl SliceSample {
    pub fn has_anomaly(&self) -> bool {
        self.mask.as_ref().is_some_and(|m| m.count_nonzero() > 0)
    }
}

/// Loads and preprocesses every entry of `splits` (patient-wise z-score
/// plus resampling to `cfg.resolution`), in manifest order.
pub fn load_samples(
    manifest: &DatasetManifest,
    cfg: &PreprocessConfig,
    splits: &[Split],
) -> Result<Vec<SliceSample>> {
    manifest.check_partition()?;
    let mut patients: Vec<(String, Split, Vec<&ManifestEntry>)> = Vec::new();
    for e in manifest.entries.iter().filter(|e| splits.contains(&e.split)) {
        match patients.iter_mut().find(|(p, _, _)| *p == e.patient_id) {
            Some((_, _, list)) => list.push(e),
            None => patients.push((e.patient_id.clone(), e.split, vec![e])),
        }
    }
    let per_patient: Vec<Result<Vec<SliceSample>>> = patients
        .par_iter()
        .map(|(pid, split, entries)| load_patient(manifest, cfg, pid, *split, entries))
        .collect();
    let mut out = Vec::new();
    for p in per_patient {
        out.extend(p?);
    }
    Ok(out)
}

fn load_patient(
    manifest: &DatasetManifest,
    cfg: &PreprocessConfig,
    pid: &str,
    split: Split,
    entries: &[&ManifestEntry],
) -> Result<Vec<SliceSample>> {
    let mut images = Vec::with_capacity(entries.len());
    let mut masks = Vec::with_capacity(entries.len());
    for e in entries {
        let img = read_slice(manifest.resolve(&e.slice_path))?;
        let mask = match &e.mask_path {
            Some(rel) => {
                let path = manifest.resolve(rel);
                let m = read_mask(&path)?;
                if m.shape() != img.shape() {
                    return Err(CevaeError::format(
                        path,
                        format!("mask shape {:?} differs from slice shape {:?}", m.shape(), img.shape()),
                    ));
                }
                Some(resample_mask(&m, cfg.resolution)?)
            }
            None => None,
        };
        images.push(img);
        masks.push(mask);
    }
    let images = match cfg.order {
        PreprocessOrder::NormalizeFirst => zscore_normalize(pid, &images)?
            .iter()
            .map(|i| resample(i, cfg.resolution))
            .collect::<Result<Vec<_>>>()?,
        PreprocessOrder::ResampleFirst => {
            let resampled = images
                .iter()
                .map(|i| resample(i, cfg.resolution))
                .collect::<Result<Vec<_>>>()?;
            zscore_normalize(pid, &resampled)?
        }
    };
    Ok(images
        .into_iter()
        .zip(masks)
        .enumerate()
        .map(|(i, (image, mask))| SliceSample {
            patient_id: pid.to_string(),
            slice_index: i,
            image,
            mask,
            split,
        })
        .collect())
}
