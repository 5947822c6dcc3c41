//! Slice-wise and pixel-wise ROC-AUC, patient-wise Dice with threshold
//! cross-validation, and aggregation over repeated runs.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Image, Mask, SliceSample};
use crate::error::{invalid, CevaeError, Result};
use crate::rng::{seeded, Rng};
use crate::scoring::ScoreDump;

/// 1 iff the slice has a mask with at least one nonzero pixel.
pub fn slice_labels(samples: &[SliceSample]) -> Vec<u8> {
    samples.iter().map(|s| s.has_anomaly() as u8).collect()
}

/// Exact ROC-AUC, `P(pos > neg) + P(tie) / 2`, from tie-grouped ranks.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return invalid(format!(
            "roc_auc: {} scores but {} labels",
            scores.len(),
            labels.len()
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(CevaeError::Numeric("roc_auc: NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut n_pos, mut n_neg) = (0u128, 0u128);
    // twice the Mann-Whitney U, kept integral so the result is exact
    let mut twice_u = 0u128;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] != 0 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice_u += 2 * p * n_neg + p * n;
        n_pos += p;
        n_neg += n;
        i = j;
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(CevaeError::UndefinedMetric(format!(
            "roc_auc needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

fn check_same_shape(a: &Mask, b: &Mask) -> Result<()> {
    if a.shape() != b.shape() {
        return invalid(format!("mask shapes differ: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// `(|P & G|, |P|, |G|)`
fn overlap_counts(pred: &Mask, gt: &Mask) -> (u64, u64, u64) {
    pred.as_slice()
        .iter()
        .zip(gt.as_slice())
        .fold((0, 0, 0), |(i, p, g), (&a, &b)| {
            let (a, b) = (a != 0, b != 0);
            (i + (a && b) as u64, p + a as u64, g + b as u64)
        })
}

fn dice_from_counts(inter: u64, p: u64, g: u64) -> f64 {
    if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    }
}

/// `2|P & G| / (|P| + |G|)`, and 1.0 when both masks are empty.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_same_shape(pred, gt)?;
    let (i, p, g) = overlap_counts(pred, gt);
    Ok(dice_from_counts(i, p, g))
}

/// Dice over all slices of one patient pooled into a single volume.
pub fn patient_dice(preds: &[Mask], gts: &[Mask]) -> Result<f64> {
    if preds.len() != gts.len() {
        return invalid("patient_dice: slice counts differ");
    }
    let mut acc = (0, 0, 0);
    for (p, g) in preds.iter().zip(gts) {
        check_same_shape(p, g)?;
        let (i, np, ng) = overlap_counts(p, g);
        acc = (acc.0 + i, acc.1 + np, acc.2 + ng);
    }
    Ok(dice_from_counts(acc.0, acc.1, acc.2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiceCvConfig {
    pub folds: usize,
    pub quantiles: usize,
}

impl Default for DiceCvConfig {
    fn default() -> Self {
        DiceCvConfig { folds: 5, quantiles: 201 }
    }
}

/// Nearest-rank quantiles `q = i / (n - 1)` of `values`, deduplicated.
fn quantile_thresholds(values: &mut [f32], n: usize) -> Vec<f32> {
    values.sort_unstable_by(f32::total_cmp);
    let last = values.len() - 1;
    let mut t: Vec<f32> = (0..n)
        .map(|i| {
            let q = if n == 1 { 1.0 } else { i as f64 / (n - 1) as f64 };
            values[(q * last as f64).round() as usize]
        })
        .collect();
    t.dedup();
    t
}

/// Per patient: slice indices into the input arrays.
type PatientSlices = Vec<Vec<usize>>;

fn mean_patient_dice(
    patients: &[usize],
    groups: &PatientSlices,
    maps: &[Image],
    gts: &[Mask],
    threshold: f32,
) -> f64 {
    let sum: f64 = patients
        .iter()
        .map(|&p| {
            let mut acc = (0u64, 0u64, 0u64);
            for &s in &groups[p] {
                for (&v, &g) in maps[s].as_slice().iter().zip(gts[s].as_slice()) {
                    let (a, b) = (v > threshold, g != 0);
                    acc.0 += (a && b) as u64;
                    acc.1 += a as u64;
                    acc.2 += b as u64;
                }
            }
            dice_from_counts(acc.0, acc.1, acc.2)
        })
        .sum();
    sum / patients.len() as f64
}

/// Dice with k-fold threshold selection over patients. Each fold picks,
/// from quantiles of its own pooled scores plus an infinite threshold that
/// predicts nothing, the threshold with the best
/// mean patient-wise Dice (prediction is `score > t`, first maximum wins),
/// then reports the mean patient-wise Dice of that threshold on the
/// remaining folds. Returns the mean over folds.
pub fn dice_cv(
    score_maps: &[Image],
    gt_masks: &[Mask],
    patient_ids: &[String],
    cfg: &DiceCvConfig,
    rng: &mut Rng,
) -> Result<f64> {
    let k = cfg.folds;
    if score_maps.len() != gt_masks.len() || score_maps.len() != patient_ids.len() {
        return invalid("dice_cv: maps, masks and patient ids must align");
    }
    if k < 2 || cfg.quantiles == 0 {
        return invalid("dice_cv needs >= 2 folds and >= 1 quantile");
    }
    for (m, g) in score_maps.iter().zip(gt_masks) {
        if m.shape() != g.shape() {
            return invalid("dice_cv: score map and mask shapes differ");
        }
        if m.as_slice().iter().any(|v| v.is_nan()) {
            return Err(CevaeError::Numeric("dice_cv: NaN score".into()));
        }
    }
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for id in patient_ids {
        let next = index.len();
        index.entry(id.as_str()).or_insert(next);
    }
    if index.len() < k {
        return invalid(format!("dice_cv: {} patients for {k} folds", index.len()));
    }
    let mut groups: PatientSlices = vec![Vec::new(); index.len()];
    for (s, id) in patient_ids.iter().enumerate() {
        groups[index[id.as_str()]].push(s);
    }
    // shuffle the sorted patient list so folds depend only on the ids and rng
    let mut order: Vec<usize> = index.values().copied().collect();
    order.shuffle(rng);
    let folds: Vec<Vec<usize>> = (0..k)
        .map(|f| order.iter().skip(f).step_by(k).copied().collect())
        .collect();

    let per_fold: Vec<f64> = folds
        .par_iter()
        .enumerate()
        .map(|(f, tune)| {
            let mut pooled: Vec<f32> = tune
                .iter()
                .flat_map(|&p| groups[p].iter().flat_map(|&s| score_maps[s].as_slice().iter().copied()))
                .collect();
            let rest: Vec<usize> = folds
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != f)
                .flat_map(|(_, ps)| ps.iter().copied())
                .collect();
            if pooled.is_empty() {
                return mean_patient_dice(&rest, &groups, score_maps, gt_masks, f32::INFINITY);
            }
            // "predict nothing" goes first so it wins ties
            let mut thresholds = vec![f32::INFINITY];
            thresholds.extend(quantile_thresholds(&mut pooled, cfg.quantiles));
            let mut best = (f64::NEG_INFINITY, f32::INFINITY);
            for &t in &thresholds {
                let d = mean_patient_dice(tune, &groups, score_maps, gt_masks, t);
                if d > best.0 {
                    best = (d, t);
                }
            }
            mean_patient_dice(&rest, &groups, score_maps, gt_masks, best.1)
        })
        .collect();
    Ok(per_fold.iter().sum::<f64>() / k as f64)
}

/// How pixel-wise ROC-AUC is pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelPooling {
    /// One AUC over every test pixel of every slice.
    #[default]
    Global,
    /// Mean of per-slice AUCs over slices that contain both classes.
    PerSlice,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub slice_roc_auc: f64,
    pub pixel_roc_auc: f64,
    pub dice_mean: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    /// Lower median for even counts.
    pub fn of(values: &[f64]) -> Result<Summary> {
        if values.is_empty() {
            return invalid("summary of no values");
        }
        let mut v = values.to_vec();
        v.sort_unstable_by(f64::total_cmp);
        Ok(Summary {
            median: v[(v.len() - 1) / 2],
            min: v[0],
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub slice_roc_auc: Summary,
    pub pixel_roc_auc: Summary,
    pub dice_mean: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub slice_roc_auc: f64,
    pub pixel_roc_auc: f64,
    pub dice_mean: f64,
    pub per_run: Vec<RunMetrics>,
    pub aggregate: Aggregate,
}

impl EvalReport {
    pub fn single(m: RunMetrics) -> EvalReport {
        aggregate_metrics(vec![m]).expect("one run")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Plain-text table, one row per run plus the summary rows.
    pub fn to_table(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>13} {:>13} {:>9}", "run", "slice_roc_auc", "pixel_roc_auc", "dice")?;
        for (i, r) in self.per_run.iter().enumerate() {
            writeln!(
                f,
                "{:<8} {:>13.4} {:>13.4} {:>9.4}",
                i, r.slice_roc_auc, r.pixel_roc_auc, r.dice_mean
            )?;
        }
        let a = &self.aggregate;
        for (name, pick) in [
            ("median", (|s: &Summary| s.median) as fn(&Summary) -> f64),
            ("min", |s| s.min),
            ("max", |s| s.max),
        ] {
            writeln!(
                f,
                "{:<8} {:>13.4} {:>13.4} {:>9.4}",
                name,
                pick(&a.slice_roc_auc),
                pick(&a.pixel_roc_auc),
                pick(&a.dice_mean)
            )?;
        }
        Ok(())
    }
}

fn aggregate_metrics(runs: Vec<RunMetrics>) -> Result<EvalReport> {
    let col = |f: fn(&RunMetrics) -> f64| Summary::of(&runs.iter().map(f).collect::<Vec<_>>());
    let aggregate = Aggregate {
        slice_roc_auc: col(|r| r.slice_roc_auc)?,
        pixel_roc_auc: col(|r| r.pixel_roc_auc)?,
        dice_mean: col(|r| r.dice_mean)?,
    };
    Ok(EvalReport {
        slice_roc_auc: aggregate.slice_roc_auc.median,
        pixel_roc_auc: aggregate.pixel_roc_auc.median,
        dice_mean: aggregate.dice_mean.median,
        per_run: runs,
        aggregate,
    })
}

/// Merges the runs of several reports; headline metrics become medians.
pub fn aggregate_runs(reports: &[EvalReport]) -> Result<EvalReport> {
    if reports.is_empty() {
        return invalid("aggregate_runs needs at least one report");
    }
    aggregate_metrics(reports.iter().flat_map(|r| r.per_run.iter().copied()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub dice: DiceCvConfig,
    pub pixel_pooling: PixelPooling,
    /// Seeds the fold assignment.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            dice: DiceCvConfig::default(),
            pixel_pooling: PixelPooling::Global,
            seed: 0,
        }
    }
}

fn pixel_labels(sample: &SliceSample) -> Mask {
    let (h, w) = sample.image.shape();
    sample.mask.clone().unwrap_or_else(|| Mask::filled(h, w, 0))
}

/// Metrics for one scored test set. Every test sample must have a row in
/// `dump`; rows are matched by `(patient_id, slice_index)`.
pub fn evaluate(samples: &[SliceSample], dump: &ScoreDump, cfg: &EvalConfig) -> Result<RunMetrics> {
    if samples.is_empty() {
        return invalid("evaluate: no test samples");
    }
    let lookup: HashMap<(&str, usize), usize> = dump
        .rows
        .iter()
        .enumerate()
        .map(|(i, (p, s, _))| ((p.as_str(), *s), i))
        .collect();
    let mut slice_scores = Vec::with_capacity(samples.len());
    let mut maps = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    for s in samples {
        let i = *lookup.get(&(s.patient_id.as_str(), s.slice_index)).ok_or_else(|| {
            CevaeError::InvalidArgument(format!(
                "no score for slice {} of patient {}",
                s.slice_index, s.patient_id
            ))
        })?;
        let gt = pixel_labels(s);
        if dump.maps[i].shape() != gt.shape() {
            return invalid(format!(
                "score map for {}:{} has shape {:?}, mask {:?}",
                s.patient_id,
                s.slice_index,
                dump.maps[i].shape(),
                gt.shape()
            ));
        }
        slice_scores.push(dump.rows[i].2.value);
        maps.push(dump.maps[i].clone());
        gts.push(gt);
    }
    let slice_roc_auc = roc_auc(&slice_scores, &slice_labels(samples))?;
    let pixel_roc_auc = match cfg.pixel_pooling {
        PixelPooling::Global => {
            let scores: Vec<f64> = maps.iter().flat_map(|m| m.as_slice().iter().map(|&v| v as f64)).collect();
            let labels: Vec<u8> = gts.iter().flat_map(|g| g.as_slice().iter().map(|&v| (v != 0) as u8)).collect();
            roc_auc(&scores, &labels)?
        }
        PixelPooling::PerSlice => {
            let aucs: Vec<f64> = maps
                .par_iter()
                .zip(&gts)
                .filter_map(|(m, g)| {
                    let scores: Vec<f64> = m.as_slice().iter().map(|&v| v as f64).collect();
                    roc_auc(&scores, g.as_slice()).ok()
                })
                .collect();
            if aucs.is_empty() {
                return Err(CevaeError::UndefinedMetric("no slice contains both pixel classes".into()));
            }
            aucs.iter().sum::<f64>() / aucs.len() as f64
        }
    };
    let ids: Vec<String> = samples.iter().map(|s| s.patient_id.clone()).collect();
    let dice_mean = dice_cv(&maps, &gts, &ids, &cfg.dice, &mut seeded(cfg.seed))?;
    Ok(RunMetrics {
        slice_roc_auc,
        pixel_roc_auc,
        dice_mean,
    })
}
