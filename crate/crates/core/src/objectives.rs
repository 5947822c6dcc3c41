//! Training objectives: KL to the standard-normal prior, L1/MSE
//! reconstruction, the factor-weighted ceVAE combination and the AE / DAE /
//! CE / VAE baselines, with hand-written gradients.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corruption::{context_corrupt, gaussian_corrupt, FillMode};
use crate::data::Image;
use crate::error::{invalid, CevaeError, Result};
use crate::model::{reparameterize, standard_normal, BackpropMode, LatentPosterior, ModelParams, Tensor};
use crate::real::Real;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "AE")]
    Ae,
    #[serde(rename = "DAE")]
    Dae,
    #[serde(rename = "CE")]
    Ce,
    #[serde(rename = "VAE")]
    Vae,
    #[serde(rename = "ceVAE")]
    CeVae,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Ae => "AE",
            ModelKind::Dae => "DAE",
            ModelKind::Ce => "CE",
            ModelKind::Vae => "VAE",
            ModelKind::CeVae => "ceVAE",
        }
    }

    /// Weight on the context-encoder term under this kind.
    pub fn effective_factor(self, cevae_factor: f64) -> f64 {
        match self {
            ModelKind::Vae => 0.0,
            ModelKind::Ce | ModelKind::Ae | ModelKind::Dae => 1.0,
            ModelKind::CeVae => cevae_factor,
        }
    }

    fn has_vae_branch(self) -> bool {
        matches!(self, ModelKind::Vae | ModelKind::Ce | ModelKind::CeVae)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = CevaeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ae" => Ok(ModelKind::Ae),
            "dae" => Ok(ModelKind::Dae),
            "ce" => Ok(ModelKind::Ce),
            "vae" => Ok(ModelKind::Vae),
            "cevae" => Ok(ModelKind::CeVae),
            _ => Err(CevaeError::InvalidArgument(format!("unknown model kind '{s}'"))),
        }
    }
}

/// Loss terms for one batch. `total` is always
/// `(1 - f) * (l_kl + l_rec_vae) + f * l_rec_ce`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_kl: f64,
    pub l_rec_vae: f64,
    pub l_rec_ce: f64,
    pub total: f64,
    pub cevae_factor: f64,
}

impl LossBreakdown {
    pub fn new(l_kl: f64, l_rec_vae: f64, l_rec_ce: f64, cevae_factor: f64) -> Self {
        LossBreakdown {
            l_kl,
            l_rec_vae,
            l_rec_ce,
            total: combine(cevae_factor, l_kl, l_rec_vae, l_rec_ce),
            cevae_factor,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_kl, self.l_rec_vae, self.l_rec_ce, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Sample-weighted running mean helper.
    pub fn weighted_mean(parts: &[(LossBreakdown, usize)]) -> LossBreakdown {
        let n: usize = parts.iter().map(|(_, c)| c).sum();
        if n == 0 {
            return LossBreakdown::default();
        }
        let avg = |f: fn(&LossBreakdown) -> f64| {
            parts.iter().map(|(l, c)| f(l) * *c as f64).sum::<f64>() / n as f64
        };
        let factor = parts[0].0.cevae_factor;
        LossBreakdown::new(avg(|l| l.l_kl), avg(|l| l.l_rec_vae), avg(|l| l.l_rec_ce), factor)
    }
}

/// Convex combination of the VAE objective and the CE reconstruction.
pub fn combine(factor: f64, l_kl: f64, l_rec_vae: f64, l_rec_ce: f64) -> f64 {
    (1.0 - factor) * (l_kl + l_rec_vae) + factor * l_rec_ce
}

/// `0.5 * sum_i (mu_i^2 + sigma_i^2 - 2 log sigma_i - 1)`, summed over
/// latent dimensions and averaged over the batch.
pub fn kl_std_normal<T: Real>(post: &LatentPosterior<T>) -> Result<f64> {
    if !post.is_finite() {
        return Err(CevaeError::Numeric("non-finite posterior parameters".into()));
    }
    Ok(kl_per_sample(post).iter().sum::<f64>() / post.batch as f64)
}

/// Per-sample KL values.
pub fn kl_per_sample<T: Real>(post: &LatentPosterior<T>) -> Vec<f64> {
    (0..post.batch)
        .map(|b| {
            let r = b * post.dim..(b + 1) * post.dim;
            0.5 * post.mu[r.clone()]
                .iter()
                .zip(&post.log_sigma[r])
                .map(|(&m, &ls)| {
                    let (m, ls) = (m.to_f64(), ls.to_f64());
                    m * m + (2.0 * ls).exp() - 2.0 * ls - 1.0
                })
                .sum::<f64>()
        })
        .collect()
}

/// Gradient of `scale * KL` with respect to (mu, log_sigma).
pub(crate) fn kl_grad<T: Real>(post: &LatentPosterior<T>, scale: T) -> (Vec<T>, Vec<T>) {
    let dmu = post.mu.iter().map(|&m| scale * m).collect();
    let dls = post
        .log_sigma
        .iter()
        .map(|&ls| {
            let s = ls.exp();
            scale * (s * s - T::ONE)
        })
        .collect();
    (dmu, dls)
}

fn check_same_shape<T: Real>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<()> {
    if x.shape() != x_hat.shape() {
        return invalid(format!(
            "reconstruction shape {:?} differs from input shape {:?}",
            x_hat.shape(),
            x.shape()
        ));
    }
    Ok(())
}

/// Sum of absolute pixel errors per sample, averaged over the batch.
pub fn l1_reconstruction<T: Real>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<f64> {
    check_same_shape(x, x_hat)?;
    Ok(x.data
        .iter()
        .zip(&x_hat.data)
        .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
        .sum::<f64>()
        / x.n as f64)
}

/// Per-sample L1 sums.
pub fn l1_per_sample<T: Real>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<Vec<f64>> {
    check_same_shape(x, x_hat)?;
    Ok((0..x.n)
        .map(|b| {
            x.sample(b)
                .iter()
                .zip(x_hat.sample(b))
                .map(|(&a, &c)| (a.to_f64() - c.to_f64()).abs())
                .sum()
        })
        .collect())
}

/// Squared-error analogue of [`l1_reconstruction`].
pub fn mse_reconstruction<T: Real>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<f64> {
    check_same_shape(x, x_hat)?;
    Ok(x.data
        .iter()
        .zip(&x_hat.data)
        .map(|(&a, &b)| (a.to_f64() - b.to_f64()).powi(2))
        .sum::<f64>()
        / x.n as f64)
}

fn l1_grad<T: Real>(x: &Tensor<T>, x_hat: &Tensor<T>, scale: T) -> Tensor<T> {
    Tensor {
        n: x.n,
        c: x.c,
        h: x.h,
        w: x.w,
        data: x_hat
            .data
            .iter()
            .zip(&x.data)
            .map(|(&xh, &xv)| scale * (xh - xv).signum_or_zero())
            .collect(),
    }
}

/// Evaluates the objective of `kind` and, when `grads` is given,
/// accumulates its parameter gradient.
///
/// * `clean`: the (augmented) target batch.
/// * `corrupted`: the masked (CE, ceVAE) or noised (DAE) input; ignored by
///   AE and VAE. CE/ceVAE fall back to `clean` when absent.
/// * `eps`: standard-normal draws for the reparameterized VAE branch.
///
/// The context-encoder branch runs through the mean head only, so it
/// contributes no KL gradient.
pub fn objective<T: Real>(
    kind: ModelKind,
    cevae_factor: f64,
    params: &ModelParams<T>,
    clean: &Tensor<T>,
    corrupted: Option<&Tensor<T>>,
    eps: &[T],
    mut grads: Option<&mut ModelParams<T>>,
) -> Result<LossBreakdown> {
    if !(0.0..=1.0).contains(&cevae_factor) {
        return invalid(format!("cevae_factor must lie in [0, 1], got {cevae_factor}"));
    }
    let factor = kind.effective_factor(cevae_factor);
    let batch = T::from_f64(clean.n as f64);
    let w_vae = T::from_f64(1.0 - factor);
    let w_ce = T::from_f64(factor);

    let (l_kl, l_rec_vae) = if kind.has_vae_branch() {
        let (post, etape) = params.encode_tape(clean)?;
        let z = reparameterize(&post, eps)?;
        let (x_hat, dtape) = params.decode_tape(&z)?;
        let l_kl = kl_std_normal(&post)?;
        let l_rec = l1_reconstruction(clean, &x_hat)?;
        if let Some(g) = grads.as_deref_mut() {
            if factor < 1.0 {
                let dx_hat = l1_grad(clean, &x_hat, w_vae / batch);
                let dz = params.decoder_backward(&dtape, &dx_hat, Some(&mut *g), BackpropMode::Vanilla);
                let (mut dmu, mut dls) = kl_grad(&post, w_vae / batch);
                for i in 0..dz.len() {
                    dmu[i] += dz[i];
                    dls[i] += dz[i] * post.log_sigma[i].exp() * eps[i];
                }
                params.encoder_backward(&etape, &dmu, &dls, Some(g), BackpropMode::Vanilla, false);
            }
        }
        (l_kl, l_rec)
    } else {
        (0.0, 0.0)
    };

    let input = match kind {
        ModelKind::Ae | ModelKind::Vae => clean,
        ModelKind::Dae => corrupted.ok_or_else(|| {
            CevaeError::InvalidArgument("DAE objective needs a noised input".into())
        })?,
        ModelKind::Ce | ModelKind::CeVae => corrupted.unwrap_or(clean),
    };
    let (post, etape) = params.encode_tape(input)?;
    let (x_hat, dtape) = params.decode_tape(&post.mu)?;
    let l_rec_ce = l1_reconstruction(clean, &x_hat)?;
    if let Some(g) = grads {
        if factor > 0.0 {
            let dx_hat = l1_grad(clean, &x_hat, w_ce / batch);
            let dz = params.decoder_backward(&dtape, &dx_hat, Some(&mut *g), BackpropMode::Vanilla);
            let zeros = vec![T::ZERO; dz.len()];
            params.encoder_backward(&etape, &dz, &zeros, Some(g), BackpropMode::Vanilla, false);
        }
    }
    let loss = LossBreakdown::new(l_kl, l_rec_vae, l_rec_ce, factor);
    if !loss.is_finite() {
        return Err(CevaeError::Numeric(format!("non-finite loss {loss:?}")));
    }
    Ok(loss)
}

/// Sign pattern of every rectifier input and every L1 residual touched by
/// [`objective`]. The objective is differentiable in any neighbourhood
/// where this pattern is constant, which is what finite-difference checks
/// need to know.
pub fn objective_signature<T: Real>(
    kind: ModelKind,
    params: &ModelParams<T>,
    clean: &Tensor<T>,
    corrupted: Option<&Tensor<T>>,
    eps: &[T],
) -> Result<Vec<bool>> {
    let mut sig = Vec::new();
    let residual_signs = |x_hat: &Tensor<T>, sig: &mut Vec<bool>| {
        sig.extend(x_hat.data.iter().zip(&clean.data).map(|(&a, &b)| a > b));
    };
    if kind.has_vae_branch() {
        let (post, etape) = params.encode_tape(clean)?;
        sig.extend(etape.signs());
        let z = reparameterize(&post, eps)?;
        let (x_hat, dtape) = params.decode_tape(&z)?;
        sig.extend(dtape.signs());
        residual_signs(&x_hat, &mut sig);
    }
    let input = match kind {
        ModelKind::Ae | ModelKind::Vae => clean,
        _ => corrupted.unwrap_or(clean),
    };
    let (post, etape) = params.encode_tape(input)?;
    sig.extend(etape.signs());
    let (x_hat, dtape) = params.decode_tape(&post.mu)?;
    sig.extend(dtape.signs());
    residual_signs(&x_hat, &mut sig);
    Ok(sig)
}

/// ceVAE objective on a clean batch and its masked counterpart; draws the
/// reparameterization noise from `rng`.
pub fn cevae_loss<T: Real>(
    x: &Tensor<T>,
    masked_x: &Tensor<T>,
    params: &ModelParams<T>,
    rng: &mut Rng,
    factor: f64,
) -> Result<LossBreakdown> {
    let eps = standard_normal::<T>(rng, x.n * params.config.latent_dim);
    objective(ModelKind::CeVae, factor, params, x, Some(masked_x), &eps, None)
}

/// Baseline objectives sharing the ceVAE network: AE (mean path, clean
/// input), DAE (mean path, noised input), CE (`factor = 1`) and VAE
/// (`factor = 0`).
pub fn baseline_loss<T: Real>(
    kind: ModelKind,
    x: &Tensor<T>,
    corrupted: Option<&Tensor<T>>,
    params: &ModelParams<T>,
    rng: &mut Rng,
) -> Result<LossBreakdown> {
    if kind == ModelKind::CeVae {
        return invalid("ceVAE is not a baseline; use cevae_loss");
    }
    let eps = standard_normal::<T>(rng, x.n * params.config.latent_dim);
    objective(kind, 0.0, params, x, corrupted, &eps, None)
}

/// Input corruption settings shared by training and validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    pub dae_sigma: f64,
    pub fill_mode: FillMode,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            dae_sigma: 0.1,
            fill_mode: FillMode::PerSquare,
        }
    }
}

/// Builds the perturbed inputs a kind trains on: square masks filled from
/// the batch's own pixels (CE, ceVAE), Gaussian noise (DAE), or nothing.
pub fn corrupt_images(
    kind: ModelKind,
    images: &[Image],
    cfg: &CorruptionConfig,
    rng: &mut Rng,
) -> Result<Option<Vec<Image>>> {
    match kind {
        ModelKind::Ae | ModelKind::Vae => Ok(None),
        ModelKind::Dae => images
            .iter()
            .map(|img| gaussian_corrupt(img, cfg.dae_sigma, rng))
            .collect::<Result<Vec<_>>>()
            .map(Some),
        ModelKind::Ce | ModelKind::CeVae => {
            let pixels: Vec<f32> = images.iter().flat_map(|i| i.as_slice()).copied().collect();
            images
                .iter()
                .map(|img| context_corrupt(img, &pixels, cfg.fill_mode, rng))
                .collect::<Result<Vec<_>>>()
                .map(Some)
        }
    }
}
