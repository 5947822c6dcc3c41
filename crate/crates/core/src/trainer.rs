//! Adam optimization loop, validation-based checkpoint selection, run
//! bookkeeping and the ceVAE-factor sweep.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corruption::{augment, sample_augment, AugmentConfig, FillMode};
use crate::data::{load_samples, DatasetManifest, Image, PreprocessConfig, SliceSample, Split};
use crate::error::{invalid, CevaeError, Result};
use crate::evaluation::{aggregate_runs, evaluate, EvalConfig, EvalReport, RunMetrics, Summary};
use crate::model::{batch_from_images, save_checkpoint, standard_normal, ModelConfig, ModelParams, Tensor};
use crate::objectives::{corrupt_images, objective, CorruptionConfig, LossBreakdown, ModelKind};
use crate::rng::{stream, Rng};
use crate::scoring::{score_samples, write_score_dir, AttributionConfig, ScoreConfig, ScoreDump};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub cevae_factor: f64,
    pub model_kind: ModelKind,
    pub seed: u64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub dae_sigma: f64,
    pub fill_mode: FillMode,
    /// `None` disables augmentation.
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            batch_size: 64,
            epochs: 60,
            cevae_factor: 0.5,
            model_kind: ModelKind::CeVae,
            seed: 0,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            dae_sigma: 0.1,
            fill_mode: FillMode::PerSquare,
            augment: Some(AugmentConfig::default()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return invalid(format!("lr must be > 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return invalid("batch_size must be >= 1");
        }
        if self.epochs == 0 {
            return invalid("epochs must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.cevae_factor) {
            return invalid(format!("cevae_factor must lie in [0, 1], got {}", self.cevae_factor));
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return invalid("adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return invalid("adam_eps must be > 0");
        }
        if !(self.dae_sigma >= 0.0) {
            return invalid("dae_sigma must be >= 0");
        }
        Ok(())
    }

    fn corruption(&self) -> CorruptionConfig {
        CorruptionConfig {
            dae_sigma: self.dae_sigma,
            fill_mode: self.fill_mode,
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: crate::real::Real>(params: &ModelParams<T>) -> Self {
        let sizes: Vec<usize> = params.tensors().iter().map(|(_, t)| t.len()).collect();
        AdamState {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified when any gradient
/// is non-finite.
pub fn adam_step<T: crate::real::Real>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    let named = grads.tensors();
    if named.len() != state.m.len() {
        return invalid("adam_step: optimizer state does not match the model");
    }
    for ((name, g), m) in named.iter().zip(&state.m) {
        if g.len() != m.len() {
            return invalid(format!("adam_step: shape mismatch for {name}"));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(CevaeError::Numeric(format!(
                "non-finite gradient in {name} at index {i}"
            )));
        }
    }
    state.step += 1;
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let grads: Vec<&[T]> = named.into_iter().map(|(_, g)| g).collect();
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for i in 0..p.len() {
            let gi = g[i].to_f64();
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            p[i] = T::from_f64(p[i].to_f64() - update);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    /// 1-based.
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
}

/// Outcome of one training run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epochs: Vec<EpochLosses>,
    /// Epoch with the lowest validation total (first one on ties).
    pub best_epoch: usize,
    pub best_checkpoint: Option<PathBuf>,
    pub best_params: ModelParams<f32>,
    pub last_params: ModelParams<f32>,
}

impl RunRecord {
    pub fn best_val(&self) -> &LossBreakdown {
        &self.epochs[self.best_epoch - 1].val
    }
}

pub const CONFIG_JSON: &str = "config.json";
pub const LOSSES_CSV: &str = "losses.csv";
pub const BEST_CHECKPOINT: &str = "checkpoints/best";
pub const LAST_CHECKPOINT: &str = "checkpoints/last";

/// Configuration echo written to `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Serialize)]
struct LossRow<'a> {
    epoch: usize,
    split: &'a str,
    l_kl: f64,
    l_rec_vae: f64,
    l_rec_ce: f64,
    total: f64,
}

fn write_losses(path: &Path, epochs: &[EpochLosses]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in epochs {
        for (split, l) in [("train", &e.train), ("val", &e.val)] {
            w.serialize(LossRow {
                epoch: e.epoch,
                split,
                l_kl: l.l_kl,
                l_rec_vae: l.l_rec_vae,
                l_rec_ce: l.l_rec_ce,
                total: l.total,
            })?;
        }
    }
    w.flush().map_err(|e| CevaeError::io(path, e))
}

/// Reads `losses.csv` back into per-epoch records.
pub fn read_losses(path: impl AsRef<Path>) -> Result<Vec<EpochLosses>> {
    #[derive(Deserialize)]
    struct Row {
        epoch: usize,
        split: String,
        l_kl: f64,
        l_rec_vae: f64,
        l_rec_ce: f64,
        total: f64,
    }
    let path = path.as_ref();
    let mut out: Vec<EpochLosses> = Vec::new();
    for row in csv::Reader::from_path(path)?.deserialize::<Row>() {
        let r = row?;
        let l = LossBreakdown {
            l_kl: r.l_kl,
            l_rec_vae: r.l_rec_vae,
            l_rec_ce: r.l_rec_ce,
            total: r.total,
            cevae_factor: f64::NAN,
        };
        match r.split.as_str() {
            "train" => out.push(EpochLosses { epoch: r.epoch, train: l, val: l }),
            "val" => match out.last_mut() {
                Some(e) if e.epoch == r.epoch => e.val = l,
                _ => return Err(CevaeError::format(path, format!("val row without train row at epoch {}", r.epoch))),
            },
            other => return Err(CevaeError::format(path, format!("unknown split {other:?}"))),
        }
    }
    Ok(out)
}

fn check_split(samples: &[SliceSample], want: Split, role: &str) -> Result<()> {
    if samples.is_empty() {
        return invalid(format!("{role} set is empty"));
    }
    if let Some(s) = samples.iter().find(|s| s.split != want) {
        return invalid(format!(
            "{role} set contains slice {} of patient {} from the {} split",
            s.slice_index, s.patient_id, s.split
        ));
    }
    Ok(())
}

/// Clean targets, the kind's perturbed inputs, and reparameterization noise.
struct Batch {
    clean: Tensor<f32>,
    corrupted: Option<Tensor<f32>>,
    eps: Vec<f32>,
}

fn prepare_batch(
    images: Vec<Image>,
    kind: ModelKind,
    corruption: &CorruptionConfig,
    latent: usize,
    rng: &mut Rng,
) -> Result<Batch> {
    let corrupted = corrupt_images(kind, &images, corruption, rng)?;
    let refs: Vec<&Image> = images.iter().collect();
    let clean = batch_from_images::<f32>(&refs)?;
    let corrupted = match corrupted {
        Some(c) => Some(batch_from_images::<f32>(&c.iter().collect::<Vec<_>>())?),
        None => None,
    };
    let eps = standard_normal::<f32>(rng, images.len() * latent);
    Ok(Batch { clean, corrupted, eps })
}

/// Validation total with a fixed stream: no augmentation, the same masks
/// and reparameterization noise every epoch.
fn validation_loss(params: &ModelParams<f32>, val: &[SliceSample], cfg: &TrainConfig) -> Result<LossBreakdown> {
    let mut rng = stream(cfg.seed, &[b"validation"]);
    let corruption = cfg.corruption();
    let mut parts = Vec::new();
    for chunk in val.chunks(cfg.batch_size) {
        let images = chunk.iter().map(|s| s.image.clone()).collect();
        let b = prepare_batch(images, cfg.model_kind, &corruption, params.config.latent_dim, &mut rng)?;
        let l = objective(cfg.model_kind, cfg.cevae_factor, params, &b.clean, b.corrupted.as_ref(), &b.eps, None)?;
        parts.push((l, chunk.len()));
    }
    Ok(LossBreakdown::weighted_mean(&parts))
}

/// Trains on preprocessed samples. With `out_dir`, writes `config.json`,
/// `losses.csv` and the `best` and `last` checkpoints there.
pub fn train_samples(
    train: &[SliceSample],
    val: &[SliceSample],
    model: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<RunRecord> {
    cfg.validate()?;
    model.validate()?;
    check_split(train, Split::Train, "training")?;
    check_split(val, Split::Val, "validation")?;
    for s in train.iter().chain(val) {
        if s.image.shape() != (model.resolution, model.resolution) {
            return invalid(format!(
                "slice {} of patient {} is {:?}, model expects {}x{}",
                s.slice_index,
                s.patient_id,
                s.image.shape(),
                model.resolution,
                model.resolution
            ));
        }
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir.join("checkpoints")).map_err(|e| CevaeError::io(dir, e))?;
        let echo = RunConfig {
            model: model.clone(),
            train: cfg.clone(),
        };
        let path = dir.join(CONFIG_JSON);
        fs::write(&path, serde_json::to_string_pretty(&echo)?).map_err(|e| CevaeError::io(&path, e))?;
    }

    let mut params = ModelParams::<f32>::init(model, &mut stream(cfg.seed, &[b"init"]))?;
    let mut adam = AdamState::new(&params);
    let corruption = cfg.corruption();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ModelParams<f32>)> = None;

    for epoch in 1..=cfg.epochs {
        let mut rng = stream(cfg.seed, &[b"epoch", &(epoch as u64).to_le_bytes()]);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut parts = Vec::new();
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let images: Vec<Image> = idx
                .iter()
                .map(|&i| match &cfg.augment {
                    Some(a) => augment(&train[i].image, &sample_augment(&mut rng, a)),
                    None => train[i].image.clone(),
                })
                .collect();
            let batch = prepare_batch(images, cfg.model_kind, &corruption, model.latent_dim, &mut rng)?;
            let mut grads = params.zeros_like();
            let loss = objective(
                cfg.model_kind,
                cfg.cevae_factor,
                &params,
                &batch.clean,
                batch.corrupted.as_ref(),
                &batch.eps,
                Some(&mut grads),
            )
            .map_err(|e| diagnose(e, epoch, b))?;
            adam_step(&mut params, &grads, &mut adam, cfg.lr, cfg.adam_betas, cfg.adam_eps)
                .map_err(|e| diagnose(e, epoch, b))?;
            parts.push((loss, idx.len()));
        }
        let train_loss = LossBreakdown::weighted_mean(&parts);
        let val_loss = validation_loss(&params, val, cfg).map_err(|e| diagnose(e, epoch, usize::MAX))?;
        epochs.push(EpochLosses {
            epoch,
            train: train_loss,
            val: val_loss,
        });
        if best.as_ref().is_none_or(|(_, t, _)| val_loss.total < *t) {
            if let Some(dir) = out_dir {
                save_checkpoint(dir.join(BEST_CHECKPOINT), &params)?;
            }
            best = Some((epoch, val_loss.total, params.clone()));
        }
        if let Some(dir) = out_dir {
            write_losses(&dir.join(LOSSES_CSV), &epochs)?;
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(dir.join(LAST_CHECKPOINT), &params)?;
    }
    let (best_epoch, _, best_params) = best.expect("at least one epoch");
    Ok(RunRecord {
        model: model.clone(),
        train: cfg.clone(),
        epochs,
        best_epoch,
        best_checkpoint: out_dir.map(|d| d.join(BEST_CHECKPOINT)),
        best_params,
        last_params: params,
    })
}

fn diagnose(e: CevaeError, epoch: usize, batch: usize) -> CevaeError {
    match e {
        CevaeError::Numeric(msg) if batch == usize::MAX => {
            CevaeError::Numeric(format!("epoch {epoch}, validation: {msg}"))
        }
        CevaeError::Numeric(msg) => CevaeError::Numeric(format!("epoch {epoch}, batch {batch}: {msg}")),
        other => other,
    }
}

/// Loads the train and validation splits at the model's resolution and
/// trains on them.
pub fn train(
    manifest: &DatasetManifest,
    model: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<RunRecord> {
    let pre = PreprocessConfig {
        resolution: model.resolution,
        ..Default::default()
    };
    let train_set = load_samples(manifest, &pre, &[Split::Train])?;
    let val_set = load_samples(manifest, &pre, &[Split::Val])?;
    train_samples(&train_set, &val_set, model, cfg, out_dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub factors: Vec<f64>,
    pub seeds: Vec<u64>,
    pub attribution: AttributionConfig,
    pub score: ScoreConfig,
    pub eval: EvalConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            factors: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            seeds: (0..5).collect(),
            attribution: AttributionConfig::default(),
            score: ScoreConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub factor: f64,
    pub seed: u64,
    pub best_epoch: usize,
    pub metrics: RunMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// One aggregate report per factor, in sweep order.
    pub per_factor: Vec<(f64, EvalReport)>,
}

/// Scores a trained model on the test set and evaluates it.
pub fn score_and_evaluate(
    params: &ModelParams<f32>,
    test: &[SliceSample],
    sweep: &SweepConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<RunMetrics> {
    let scored = score_samples(params, test, &sweep.attribution, &sweep.score, seed)?;
    if let Some(dir) = out_dir {
        write_score_dir(dir, &scored, false)?;
    }
    let dump = ScoreDump {
        rows: scored
            .iter()
            .map(|s| (s.patient_id.clone(), s.slice_index, s.sample))
            .collect(),
        maps: scored.iter().map(|s| s.pixel.scores.map(|v| v as f32)).collect(),
    };
    evaluate(test, &dump, &sweep.eval)
}

/// Trains and evaluates one model per (factor, seed). With `out_dir`,
/// every run gets its own subdirectory and the sweep writes `sweep.csv`,
/// `sweep.json` and `sweep.svg`.
pub fn factor_sweep(
    train: &[SliceSample],
    val: &[SliceSample],
    test: &[SliceSample],
    model: &ModelConfig,
    base: &TrainConfig,
    sweep: &SweepConfig,
    out_dir: Option<&Path>,
) -> Result<SweepResult> {
    if sweep.factors.is_empty() || sweep.seeds.is_empty() {
        return invalid("sweep needs at least one factor and one seed");
    }
    if let Some(f) = sweep.factors.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return invalid(format!("sweep factor {f} outside [0, 1]"));
    }
    check_split(test, Split::Test, "test")?;
    let mut rows = Vec::new();
    let mut per_factor = Vec::new();
    for &factor in &sweep.factors {
        let mut reports = Vec::new();
        for &seed in &sweep.seeds {
            let cfg = TrainConfig {
                cevae_factor: factor,
                seed,
                ..base.clone()
            };
            let run_dir = out_dir.map(|d| d.join(format!("factor_{factor:.2}_seed_{seed}")));
            let record = train_samples(train, val, model, &cfg, run_dir.as_deref())?;
            let metrics = score_and_evaluate(
                &record.best_params,
                test,
                sweep,
                seed,
                run_dir.as_deref().map(|d| d.join("scores")).as_deref(),
            )?;
            rows.push(SweepRow {
                factor,
                seed,
                best_epoch: record.best_epoch,
                metrics,
            });
            reports.push(EvalReport::single(metrics));
        }
        per_factor.push((factor, aggregate_runs(&reports)?));
    }
    let result = SweepResult { rows, per_factor };
    if let Some(dir) = out_dir {
        write_sweep(dir, &result)?;
    }
    Ok(result)
}

impl SweepResult {
    /// Plain-text table keyed by factor.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:>6} {:>22} {:>22} {:>22}\n",
            "factor", "slice_auc med[min,max]", "pixel_auc med[min,max]", "dice med[min,max]"
        );
        for (f, r) in &self.per_factor {
            let a = &r.aggregate;
            let cell = |x: &Summary| format!("{:.3} [{:.3},{:.3}]", x.median, x.min, x.max);
            let _ = writeln!(
                s,
                "{:>6.2} {:>22} {:>22} {:>22}",
                f,
                cell(&a.slice_roc_auc),
                cell(&a.pixel_roc_auc),
                cell(&a.dice_mean)
            );
        }
        s
    }

    /// Line plot of Dice and pixel ROC-AUC against the factor, with
    /// min/max bands around the median.
    pub fn to_svg(&self) -> String {
        let (w, h, m) = (640.0, 400.0, 50.0);
        let fs: Vec<f64> = self.per_factor.iter().map(|(f, _)| *f).collect();
        let (f_lo, f_hi) = fs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &f| (a.min(f), b.max(f)));
        let span = if f_hi > f_lo { f_hi - f_lo } else { 1.0 };
        let px = |f: f64| m + (f - f_lo) / span * (w - 2.0 * m);
        let py = |v: f64| h - m - v.clamp(0.0, 1.0) * (h - 2.0 * m);
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
             <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
             <line x1=\"{m}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
             <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{y0}\" stroke=\"black\"/>\n\
             <text x=\"{cx}\" y=\"{ly}\" text-anchor=\"middle\">ceVAE factor</text>\n",
            y0 = h - m,
            x1 = w - m,
            cx = w / 2.0,
            ly = h - 12.0
        );
        for i in 0..=4 {
            let v = i as f64 / 4.0;
            let _ = writeln!(
                svg,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{v:.2}</text>",
                m - 6.0,
                py(v) + 4.0
            );
        }
        for &f in &fs {
            let _ = writeln!(
                svg,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{f:.2}</text>",
                px(f),
                h - m + 16.0
            );
        }
        type Pick = fn(&EvalReport) -> Summary;
        let series: [(&str, &str, Pick); 2] = [
            ("pixel ROC-AUC", "#1f77b4", |r| r.aggregate.pixel_roc_auc),
            ("Dice", "#d62728", |r| r.aggregate.dice_mean),
        ];
        for (k, (name, color, pick)) in series.iter().enumerate() {
            let stats: Vec<(f64, Summary)> =
                self.per_factor.iter().map(|(f, r)| (*f, pick(r))).collect();
            let upper: Vec<String> = stats.iter().map(|(f, s)| format!("{:.1},{:.1}", px(*f), py(s.max))).collect();
            let lower: Vec<String> = stats
                .iter()
                .rev()
                .map(|(f, s)| format!("{:.1},{:.1}", px(*f), py(s.min)))
                .collect();
            let _ = writeln!(
                svg,
                "<polygon points=\"{} {}\" fill=\"{color}\" fill-opacity=\"0.2\" stroke=\"none\"/>",
                upper.join(" "),
                lower.join(" ")
            );
            let median: Vec<String> = stats.iter().map(|(f, s)| format!("{:.1},{:.1}", px(*f), py(s.median))).collect();
            let _ = writeln!(
                svg,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
                median.join(" ")
            );
            let _ = writeln!(
                svg,
                "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{name}</text>",
                w - m - 110.0,
                m + 16.0 * k as f64
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}

fn write_sweep(dir: &Path, result: &SweepResult) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CevaeError::io(dir, e))?;
    let csv_path = dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["factor", "seed", "best_epoch", "slice_roc_auc", "pixel_roc_auc", "dice_mean"])?;
    for r in &result.rows {
        w.write_record([
            r.factor.to_string(),
            r.seed.to_string(),
            r.best_epoch.to_string(),
            r.metrics.slice_roc_auc.to_string(),
            r.metrics.pixel_roc_auc.to_string(),
            r.metrics.dice_mean.to_string(),
        ])?;
    }
    w.flush().map_err(|e| CevaeError::io(&csv_path, e))?;
    for (name, body) in [
        ("sweep.json", serde_json::to_string_pretty(result)?),
        ("sweep.txt", result.to_table()),
        ("sweep.svg", result.to_svg()),
    ] {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| CevaeError::io(&p, e))?;
    }
    Ok(())
}
