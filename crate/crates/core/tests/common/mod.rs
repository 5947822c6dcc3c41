#![allow(dead_code)]

use cevae::corruption::{context_corrupt, FillMode};
use cevae::data::Image;
use cevae::model::{batch_from_images, standard_normal, BackpropMode, ModelConfig, ModelParams, Tensor};
use cevae::objectives::{kl_per_sample, objective, objective_signature, ModelKind};
use cevae::rng::{seeded, Rng};
use cevae::scoring::{backprop_to_input, AttributionTarget};
use rand::Rng as _;

pub const FD_STEP: f64 = 1e-3;
pub const FD_REL_TOL: f64 = 1e-3;
/// Multiples of `eps * |L| / h`, the rounding noise of a central difference.
const FD_NOISE_ULPS: f64 = 16.0;

pub fn small_config() -> ModelConfig {
    ModelConfig {
        resolution: 16,
        channels: vec![8, 16, 32],
        latent_dim: 32,
        ..Default::default()
    }
}

pub fn random_images(rng: &mut Rng, n: usize, res: usize) -> Vec<Image> {
    (0..n)
        .map(|_| Image::from_fn(res, res, |_, _| rng.random_range(-1.5..1.5)))
        .collect()
}

pub struct Problem {
    pub kind: ModelKind,
    pub factor: f64,
    pub params: ModelParams<f64>,
    pub clean: Tensor<f64>,
    pub corrupted: Option<Tensor<f64>>,
    pub eps: Vec<f64>,
}

impl Problem {
    pub fn new(kind: ModelKind, factor: f64, seed: u64) -> Problem {
        let cfg = small_config();
        let mut rng = seeded(seed);
        let params = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
        let imgs = random_images(&mut rng, 2, cfg.resolution);
        let pixels: Vec<f32> = imgs.iter().flat_map(|i| i.as_slice().iter().copied()).collect();
        let corrupted_imgs: Vec<Image> = match kind {
            ModelKind::Ce | ModelKind::CeVae => imgs
                .iter()
                .map(|i| context_corrupt(i, &pixels, FillMode::PerSquare, &mut rng).unwrap())
                .collect(),
            ModelKind::Dae => imgs
                .iter()
                .map(|i| i.map(|v| v + rng.random_range(-0.2f32..0.2)))
                .collect(),
            _ => Vec::new(),
        };
        let clean = batch_from_images::<f64>(&imgs.iter().collect::<Vec<_>>()).unwrap();
        let corrupted = (!corrupted_imgs.is_empty())
            .then(|| batch_from_images::<f64>(&corrupted_imgs.iter().collect::<Vec<_>>()).unwrap());
        let eps = standard_normal::<f64>(&mut rng, 2 * cfg.latent_dim);
        Problem {
            kind,
            factor,
            params,
            clean,
            corrupted,
            eps,
        }
    }

    fn loss(&self, p: &ModelParams<f64>) -> f64 {
        objective(self.kind, self.factor, p, &self.clean, self.corrupted.as_ref(), &self.eps, None)
            .unwrap()
            .total
    }

    fn signature(&self, p: &ModelParams<f64>) -> Vec<bool> {
        objective_signature(self.kind, p, &self.clean, self.corrupted.as_ref(), &self.eps).unwrap()
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    pub skipped_at_kinks: usize,
    /// Entries whose relative error exceeded the tolerance but whose
    /// absolute error stayed within the rounding noise of the difference.
    pub within_noise: usize,
    pub failures: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl FdReport {
    fn record(&mut self, what: String, a: f64, n: f64, loss_scale: f64) {
        let e = rel_err(a, n);
        let noise = FD_NOISE_ULPS * f64::EPSILON * loss_scale.abs().max(1.0) / FD_STEP;
        if e >= FD_REL_TOL {
            if (a - n).abs() <= noise {
                self.within_noise += 1;
            } else {
                self.failures += 1;
            }
        }
        if e >= self.max_rel_err {
            self.max_rel_err = e;
        }
        if e >= FD_REL_TOL && (a - n).abs() > noise && self.worst.is_empty() {
            self.worst = format!("{what}: analytic {a:.6e}, numeric {n:.6e}");
        }
        self.checked += 1;
    }

    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    pub fn summary(&self) -> String {
        format!(
            "{} checked, {} skipped at kinks, {} failed, {} within rounding noise, max rel err {:.2e}",
            self.checked, self.skipped_at_kinks, self.failures, self.within_noise, self.max_rel_err
        )
    }
}

/// Central differences on `count` random parameters, skipping any whose
/// stencil crosses a rectifier or L1 kink.
pub fn check_param_gradients(problem: &Problem, count: usize, seed: u64) -> FdReport {
    let mut grads = problem.params.zeros_like();
    objective(
        problem.kind,
        problem.factor,
        &problem.params,
        &problem.clean,
        problem.corrupted.as_ref(),
        &problem.eps,
        Some(&mut grads),
    )
    .unwrap();
    let names: Vec<String> = problem.params.tensors().into_iter().map(|(n, _)| n).collect();
    let sizes: Vec<usize> = problem.params.tensors().iter().map(|(_, t)| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().map(|(_, g)| g.to_vec()).collect();
    let base_sig = problem.signature(&problem.params);
    let mut rng = seeded(seed);
    let mut report = FdReport::default();
    let mut tried = std::collections::HashSet::new();
    while report.checked < count && tried.len() < total {
        let mut flat = rng.random_range(0..total);
        let mut t = 0;
        while flat >= sizes[t] {
            flat -= sizes[t];
            t += 1;
        }
        if !tried.insert((t, flat)) {
            continue;
        }
        let mut plus = problem.params.clone();
        plus.tensors_mut()[t][flat] += FD_STEP;
        let mut minus = problem.params.clone();
        minus.tensors_mut()[t][flat] -= FD_STEP;
        if problem.signature(&plus) != base_sig || problem.signature(&minus) != base_sig {
            report.skipped_at_kinks += 1;
            continue;
        }
        let (lp, lm) = (problem.loss(&plus), problem.loss(&minus));
        let numeric = (lp - lm) / (2.0 * FD_STEP);
        report.record(format!("{}[{flat}]", names[t]), analytic[t][flat], numeric, lp.abs().max(lm.abs()));
    }
    report
}

/// Vanilla input gradient of the per-sample KL term against central
/// differences over every pixel of a single slice.
pub fn check_input_gradient(params: &ModelParams<f64>, image: &Image) -> FdReport {
    let x = batch_from_images::<f64>(&[image]).unwrap();
    let analytic = backprop_to_input(params, &x, AttributionTarget::Kl, BackpropMode::Vanilla).unwrap();
    let base_sig = params.encoder_signature(&x).unwrap();
    let kl = |x: &Tensor<f64>| kl_per_sample(&params.encode(x).unwrap())[0];
    let mut report = FdReport::default();
    for i in 0..x.data.len() {
        let mut plus = x.clone();
        plus.data[i] += FD_STEP;
        let mut minus = x.clone();
        minus.data[i] -= FD_STEP;
        if params.encoder_signature(&plus).unwrap() != base_sig || params.encoder_signature(&minus).unwrap() != base_sig {
            report.skipped_at_kinks += 1;
            continue;
        }
        let (lp, lm) = (kl(&plus), kl(&minus));
        let numeric = (lp - lm) / (2.0 * FD_STEP);
        report.record(format!("pixel {i}"), analytic.data[i], numeric, lp.abs().max(lm.abs()));
    }
    report
}
