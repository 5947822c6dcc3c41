//! Flat key/value configuration shared by every subcommand.
//!
//! Precedence, lowest first: built-in defaults, `--config FILE`, explicit
//! flags, `--set key=value`. Unknown keys are rejected at every layer.

use std::fs;
use std::path::Path;

use cevae::corruption::{AugmentConfig, FillMode};
use cevae::data::PhantomConfig;
use cevae::evaluation::{DiceCvConfig, EvalConfig, PixelPooling};
use cevae::model::ModelConfig;
use cevae::objectives::ModelKind;
use cevae::scoring::{AttributionConfig, AttributionMode, AttributionTarget, ScoreConfig};
use cevae::trainer::{SweepConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Settings {
    // data generation
    pub n_patients: usize,
    pub n_train_patients: usize,
    pub n_val_patients: usize,
    pub slices_per_patient: usize,
    pub anomaly_fraction: f64,
    pub anomaly_intensity_shift: f64,
    pub anomaly_radius_range: (usize, usize),

    // model
    pub resolution: usize,
    pub channels: Vec<usize>,
    pub latent_dim: usize,
    pub kernel: usize,
    pub stride: usize,
    pub leaky_slope: f64,
    pub coordconv: bool,
    pub coordconv_all_layers: bool,

    // training
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
    pub augment: bool,
    pub mirror_prob: f64,
    pub rotation_range: (f64, f64),
    pub brightness_range: (f64, f64),

    // scoring
    pub mode: AttributionMode,
    pub attribution_target: AttributionTarget,
    pub smoothgrad_n: usize,
    pub smoothgrad_sigma: Option<f64>,
    pub smoothing_sigma_px: f64,
    pub mc_samples: Option<usize>,
    pub png: bool,

    // evaluation
    pub folds: usize,
    pub quantiles: usize,
    pub pixel_pooling: PixelPooling,
    pub eval_seed: u64,

    // sweep
    pub factors: Vec<f64>,
    pub seeds: usize,
}

impl Default for Settings {
    fn default() -> Self {
        let phantom = PhantomConfig::default();
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let aug = AugmentConfig::default();
        let attr = AttributionConfig::default();
        let eval = EvalConfig::default();
        Settings {
            n_patients: phantom.n_patients,
            n_train_patients: phantom.n_train_patients,
            n_val_patients: phantom.n_val_patients,
            slices_per_patient: phantom.slices_per_patient,
            anomaly_fraction: phantom.anomaly_fraction,
            anomaly_intensity_shift: phantom.anomaly_intensity_shift,
            anomaly_radius_range: phantom.anomaly_radius_range,
            resolution: model.resolution,
            channels: model.channels,
            latent_dim: model.latent_dim,
            kernel: model.kernel,
            stride: model.stride,
            leaky_slope: model.leaky_slope,
            coordconv: model.coordconv,
            coordconv_all_layers: model.coordconv_all_layers,
            lr: train.lr,
            batch_size: train.batch_size,
            epochs: train.epochs,
            cevae_factor: train.cevae_factor,
            model_kind: train.model_kind,
            seed: train.seed,
            adam_betas: train.adam_betas,
            adam_eps: train.adam_eps,
            dae_sigma: train.dae_sigma,
            fill_mode: train.fill_mode,
            augment: true,
            mirror_prob: aug.mirror_prob,
            rotation_range: aug.rotation_range,
            brightness_range: aug.brightness_range,
            mode: attr.mode,
            attribution_target: attr.target,
            smoothgrad_n: attr.smoothgrad_n,
            smoothgrad_sigma: attr.smoothgrad_sigma,
            smoothing_sigma_px: attr.smoothing_sigma_px,
            mc_samples: None,
            png: false,
            folds: eval.dice.folds,
            quantiles: eval.dice.quantiles,
            pixel_pooling: eval.pixel_pooling,
            eval_seed: eval.seed,
            factors: SweepConfig::default().factors,
            seeds: 5,
        }
    }
}

/// Accumulates override layers on top of the defaults.
pub struct Layers {
    values: Map<String, Value>,
}

impl Layers {
    pub fn new() -> Self {
        let Value::Object(values) = serde_json::to_value(Settings::default()).expect("serializable") else {
            unreachable!("settings serialize to an object")
        };
        Layers { values }
    }

    fn put(&mut self, key: &str, value: Value, origin: &str) -> Result<(), String> {
        if !self.values.contains_key(key) {
            return Err(format!("unknown config key {key:?} ({origin})"));
        }
        self.values.insert(key.to_string(), value);
        Ok(())
    }

    pub fn file(&mut self, path: &Path) -> Result<(), String> {
        let text = fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let Value::Object(map) =
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?
        else {
            return Err(format!("{}: config must be a flat JSON object", path.display()));
        };
        let origin = path.display().to_string();
        for (k, v) in map {
            self.put(&k, v, &origin)?;
        }
        Ok(())
    }

    pub fn flag(&mut self, key: &str, value: impl Serialize) -> Result<(), String> {
        let v = serde_json::to_value(value).map_err(|e| e.to_string())?;
        self.put(key, v, "command-line flag")
    }

    /// `key=value`, where the value is parsed as JSON and falls back to a
    /// plain string.
    pub fn set(&mut self, pair: &str) -> Result<(), String> {
        let (k, raw) = pair
            .split_once('=')
            .ok_or_else(|| format!("--set expects key=value, got {pair:?}"))?;
        let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        self.put(k.trim(), v, "--set")
    }

    pub fn finish(self) -> Result<Settings, String> {
        serde_json::from_value(Value::Object(self.values)).map_err(|e| format!("invalid configuration: {e}"))
    }
}

impl Settings {
    pub fn phantom(&self) -> PhantomConfig {
        PhantomConfig {
            n_patients: self.n_patients,
            n_train_patients: self.n_train_patients,
            n_val_patients: self.n_val_patients,
            slices_per_patient: self.slices_per_patient,
            anomaly_fraction: self.anomaly_fraction,
            anomaly_intensity_shift: self.anomaly_intensity_shift,
            anomaly_radius_range: self.anomaly_radius_range,
            resolution: self.resolution,
            seed: self.seed,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            resolution: self.resolution,
            channels: self.channels.clone(),
            latent_dim: self.latent_dim,
            kernel: self.kernel,
            stride: self.stride,
            leaky_slope: self.leaky_slope,
            coordconv: self.coordconv,
            coordconv_all_layers: self.coordconv_all_layers,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            cevae_factor: self.cevae_factor,
            model_kind: self.model_kind,
            seed: self.seed,
            adam_betas: self.adam_betas,
            adam_eps: self.adam_eps,
            dae_sigma: self.dae_sigma,
            fill_mode: self.fill_mode,
            augment: self.augment.then_some(AugmentConfig {
                mirror_prob: self.mirror_prob,
                rotation_range: self.rotation_range,
                brightness_range: self.brightness_range,
            }),
        }
    }

    pub fn attribution(&self) -> AttributionConfig {
        AttributionConfig {
            mode: self.mode,
            smoothgrad_n: self.smoothgrad_n,
            smoothgrad_sigma: self.smoothgrad_sigma,
            smoothing_sigma_px: self.smoothing_sigma_px,
            target: self.attribution_target,
        }
    }

    pub fn score(&self) -> ScoreConfig {
        ScoreConfig {
            mc_samples: self.mc_samples,
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            dice: DiceCvConfig {
                folds: self.folds,
                quantiles: self.quantiles,
            },
            pixel_pooling: self.pixel_pooling,
            seed: self.eval_seed,
        }
    }

    pub fn sweep(&self) -> SweepConfig {
        SweepConfig {
            factors: self.factors.clone(),
            seeds: (0..self.seeds as u64).map(|i| self.seed + i).collect(),
            attribution: self.attribution(),
            score: self.score(),
            eval: self.eval(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layering_and_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        fs::write(&file, r#"{"epochs": 3, "lr": 0.01}"#).unwrap();
        let mut l = Layers::new();
        l.file(&file).unwrap();
        l.flag("epochs", 7).unwrap();
        l.set("model_kind=VAE").unwrap();
        l.set("channels=[4,8]").unwrap();
        let s = l.finish().unwrap();
        assert_eq!((s.epochs, s.lr), (7, 0.01));
        assert_eq!(s.model_kind, ModelKind::Vae);
        assert_eq!(s.channels, vec![4, 8]);

        let mut l = Layers::new();
        assert!(l.set("bogus=1").unwrap_err().contains("bogus"));
        assert!(l.set("novalue").is_err());
        fs::write(&file, r#"{"epoch": 3}"#).unwrap();
        assert!(l.file(&file).unwrap_err().contains("epoch"));
        let mut l = Layers::new();
        l.set("epochs=\"many\"").unwrap();
        assert!(l.finish().is_err());
    }

    #[test]
    fn defaults_round_trip() {
        let s = Settings::default();
        assert_eq!(s.train(), TrainConfig::default());
        assert_eq!(s.model(), ModelConfig::default());
        assert_eq!(s.attribution(), AttributionConfig::default());
        assert_eq!(s.eval(), EvalConfig::default());
        assert_eq!(Layers::new().finish().unwrap(), s);
    }
}
