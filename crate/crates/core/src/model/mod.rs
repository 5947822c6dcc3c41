//! Shared-weight convolutional encoder (mean and log-sigma heads) and
//! transposed-convolution decoder.
//!
//! Encoder: `len(channels)` strided convolutions (kernel `k`, stride `s`,
//! padding `(k - s) / 2`, LeakyReLU) followed by a valid convolution that
//! collapses the remaining spatial extent to 1x1 and emits
//! `2 * latent_dim` channels: the first half is the posterior mean, the
//! second half its log standard deviation. The decoder mirrors this with
//! transposed convolutions and ends in a linear layer.

pub mod checkpoint;
pub mod layers;
pub mod tensor;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use layers::{add_coord_channels, BackpropMode, Conv2d, ConvTranspose2d};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use tensor::Tensor;

use crate::data::Image;
use crate::error::{invalid, CevaeError, Result};
use crate::real::Real;
use crate::rng::Rng;
use layers::{leaky_relu_backward, leaky_relu_forward, strip_coord_channels, ConvCache, ConvTCache};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub resolution: usize,
    pub channels: Vec<usize>,
    pub latent_dim: usize,
    pub kernel: usize,
    pub stride: usize,
    pub leaky_slope: f64,
    /// Append coordinate channels to the encoder input.
    pub coordconv: bool,
    /// Append coordinate channels to every layer input instead.
    #[serde(default)]
    pub coordconv_all_layers: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            resolution: 64,
            channels: vec![16, 64, 256, 1024],
            latent_dim: 1024,
            kernel: 4,
            stride: 2,
            leaky_slope: 0.01,
            coordconv: true,
            coordconv_all_layers: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return invalid("channels must be a nonempty list of positive counts");
        }
        if self.latent_dim == 0 {
            return invalid("latent_dim must be >= 1");
        }
        if self.stride == 0 || self.kernel < self.stride || !(self.kernel - self.stride).is_multiple_of(2) {
            return invalid(format!(
                "kernel {} and stride {} must satisfy kernel >= stride with an even difference",
                self.kernel, self.stride
            ));
        }
        let depth = u32::try_from(self.channels.len() + 1).unwrap_or(u32::MAX);
        let divisor = self.stride.checked_pow(depth).unwrap_or(usize::MAX);
        if self.resolution == 0 || !self.resolution.is_multiple_of(divisor) {
            return invalid(format!(
                "resolution {} must be divisible by stride^(layers+1) = {divisor}",
                self.resolution
            ));
        }
        if !(self.leaky_slope.is_finite()) {
            return invalid("leaky_slope must be finite");
        }
        Ok(())
    }

    pub fn pad(&self) -> usize {
        (self.kernel - self.stride) / 2
    }

    /// Spatial extent after the strided stack; also the head kernel size.
    pub fn bottleneck_size(&self) -> usize {
        self.resolution / self.stride.pow(self.channels.len() as u32)
    }

    fn coord_extra(&self, first: bool) -> usize {
        if self.coordconv && (first || self.coordconv_all_layers) {
            2
        } else {
            0
        }
    }

    fn coord_all(&self) -> usize {
        if self.coordconv && self.coordconv_all_layers {
            2
        } else {
            0
        }
    }
}

/// Diagonal-Gaussian posterior for a batch; row `i` of each buffer belongs
/// to sample `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPosterior<T> {
    pub batch: usize,
    pub dim: usize,
    pub mu: Vec<T>,
    /// log of the standard deviation
    pub log_sigma: Vec<T>,
}

impl<T: Real> LatentPosterior<T> {
    pub fn new(dim: usize, mu: Vec<T>, log_sigma: Vec<T>) -> Result<Self> {
        if dim == 0 || mu.len() != log_sigma.len() || !mu.len().is_multiple_of(dim) {
            return invalid("posterior mu/log_sigma lengths must match and be a multiple of dim");
        }
        Ok(LatentPosterior {
            batch: mu.len() / dim,
            dim,
            mu,
            log_sigma,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().chain(&self.log_sigma).all(|v| v.is_finite())
    }
}

/// `z = mu + exp(log_sigma) * eps`
pub fn reparameterize<T: Real>(post: &LatentPosterior<T>, eps: &[T]) -> Result<Vec<T>> {
    if eps.len() != post.mu.len() {
        return invalid(format!(
            "eps length {} does not match posterior size {}",
            eps.len(),
            post.mu.len()
        ));
    }
    Ok(post
        .mu
        .iter()
        .zip(&post.log_sigma)
        .zip(eps)
        .map(|((&m, &ls), &e)| m + ls.exp() * e)
        .collect())
}

pub fn standard_normal<T: Real>(rng: &mut Rng, n: usize) -> Vec<T> {
    (0..n)
        .map(|_| T::from_f64(StandardNormal.sample(rng)))
        .collect()
}

/// Stacks single-channel images into a `[B, 1, H, W]` batch.
pub fn batch_from_images<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| CevaeError::InvalidArgument("empty image batch".into()))?;
    let (h, w) = first.shape();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.shape() != (h, w) {
            return invalid("images in a batch must share one shape");
        }
        data.extend(img.as_slice().iter().map(|&v| T::from_f64(v as f64)));
    }
    Tensor::from_vec(images.len(), 1, h, w, data)
}

/// Encoder, heads and decoder weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub encoder: Vec<Conv2d<T>>,
    pub head: Conv2d<T>,
    pub decoder: Vec<ConvTranspose2d<T>>,
}

pub(crate) struct EncoderTape<T> {
    layers: Vec<(ConvCache<T>, Vec<T>, [usize; 4])>,
    head: ConvCache<T>,
    n: usize,
}

impl<T: Real> EncoderTape<T> {
    /// `pre > 0` for every rectifier input.
    pub(crate) fn signs(&self) -> impl Iterator<Item = bool> + '_ {
        self.layers
            .iter()
            .flat_map(|(_, pre, _)| pre.iter().map(|&v| v > T::ZERO))
    }
}

pub(crate) struct DecoderTape<T> {
    layers: Vec<(ConvTCache<T>, Vec<T>, [usize; 4])>,
    n: usize,
}

impl<T: Real> DecoderTape<T> {
    pub(crate) fn signs(&self) -> impl Iterator<Item = bool> + '_ {
        self.layers
            .iter()
            .flat_map(|(_, pre, _)| pre.iter().map(|&v| v > T::ZERO))
    }
}

/// Output of a stochastic VAE pass.
#[derive(Debug, Clone)]
pub struct VaeForward<T> {
    pub x_hat: Tensor<T>,
    pub posterior: LatentPosterior<T>,
    pub z: Vec<T>,
}

impl<T: Real> ModelParams<T> {
    /// Parameter shapes for `config`, all zero.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let (k, s, p) = (config.kernel, config.stride, config.pad());
        let ch = &config.channels;
        let depth = ch.len();
        let encoder = (0..depth)
            .map(|i| {
                let in_c = if i == 0 { 1 } else { ch[i - 1] } + config.coord_extra(i == 0);
                Conv2d::zeros(in_c, ch[i], k, s, p)
            })
            .collect();
        let bottleneck = config.bottleneck_size();
        let head = Conv2d::zeros(
            ch[depth - 1] + config.coord_all(),
            2 * config.latent_dim,
            bottleneck,
            1,
            0,
        );
        let mut decoder = vec![ConvTranspose2d::zeros(
            config.latent_dim + config.coord_all(),
            ch[depth - 1],
            bottleneck,
            1,
            0,
        )];
        for j in 1..=depth {
            let in_c = ch[depth - j] + config.coord_all();
            let out_c = if j == depth { 1 } else { ch[depth - j - 1] };
            decoder.push(ConvTranspose2d::zeros(in_c, out_c, k, s, p));
        }
        Ok(ModelParams {
            config: config.clone(),
            encoder,
            head,
            decoder,
        })
    }

    /// Fan-in scaled uniform init: He bound for layers feeding a LeakyReLU,
    /// variance-preserving bound for the linear head and output layer.
    /// Biases start at zero (so the log-sigma head starts at sigma = 1).
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let slope = config.leaky_slope;
        let gain_act = 2.0 / (1.0 + slope * slope);
        let fill = |w: &mut [T], fan_in: usize, gain: f64, rng: &mut Rng| {
            let bound = (3.0 * gain / fan_in as f64).sqrt();
            for v in w {
                *v = T::from_f64(rng.random_range(-bound..=bound));
            }
        };
        for conv in &mut p.encoder {
            let fan = conv.in_c * conv.k * conv.k;
            fill(&mut conv.weight, fan, gain_act, rng);
        }
        let fan = p.head.in_c * p.head.k * p.head.k;
        fill(&mut p.head.weight, fan, 1.0, rng);
        let n_dec = p.decoder.len();
        for (j, conv) in p.decoder.iter_mut().enumerate() {
            // contributions per output pixel of a transposed conv
            let per_axis = if j == 0 { 1 } else { conv.k.div_ceil(conv.stride) };
            let fan = conv.in_c * per_axis * per_axis;
            let gain = if j + 1 == n_dec { 1.0 } else { gain_act };
            fill(&mut conv.weight, fan, gain, rng);
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config).expect("config already validated")
    }

    pub fn slope(&self) -> T {
        T::from_f64(self.config.leaky_slope)
    }

    /// Named parameter tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[T])> {
        let mut out: Vec<(String, &[T])> = Vec::new();
        for (i, c) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), &c.weight));
            out.push((format!("encoder.{i}.bias"), &c.bias));
        }
        out.push(("encoder.head.weight".into(), &self.head.weight));
        out.push(("encoder.head.bias".into(), &self.head.bias));
        for (j, c) in self.decoder.iter().enumerate() {
            out.push((format!("decoder.{j}.weight"), &c.weight));
            out.push((format!("decoder.{j}.bias"), &c.bias));
        }
        out
    }

    /// Same order as [`Self::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::new();
        for c in &mut self.encoder {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        for c in &mut self.decoder {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Converts to another precision.
    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let conv = |c: &Conv2d<T>| Conv2d {
            in_c: c.in_c,
            out_c: c.out_c,
            k: c.k,
            stride: c.stride,
            pad: c.pad,
            weight: c.weight.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            bias: c.bias.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        };
        let convt = |c: &ConvTranspose2d<T>| ConvTranspose2d {
            in_c: c.in_c,
            out_c: c.out_c,
            k: c.k,
            stride: c.stride,
            pad: c.pad,
            weight: c.weight.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            bias: c.bias.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        };
        ModelParams {
            config: self.config.clone(),
            encoder: self.encoder.iter().map(conv).collect(),
            head: conv(&self.head),
            decoder: self.decoder.iter().map(convt).collect(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let r = self.config.resolution;
        if x.c != 1 || x.h != r || x.w != r || x.n == 0 {
            return invalid(format!(
                "encoder expects a [B>=1, 1, {r}, {r}] batch, got {:?}",
                x.shape()
            ));
        }
        Ok(())
    }

    pub(crate) fn encode_tape(&self, x: &Tensor<T>) -> Result<(LatentPosterior<T>, EncoderTape<T>)> {
        self.check_input(x)?;
        let slope = self.slope();
        let mut layers = Vec::with_capacity(self.encoder.len());
        let mut h = x.clone();
        for (i, conv) in self.encoder.iter().enumerate() {
            if self.config.coord_extra(i == 0) > 0 {
                h = add_coord_channels(&h);
            }
            let (pre, cache) = conv.forward(&h);
            let shape = pre.shape();
            let mut post = pre.data.clone();
            leaky_relu_forward(&mut post, slope);
            layers.push((cache, pre.data, shape));
            h = Tensor {
                n: shape[0],
                c: shape[1],
                h: shape[2],
                w: shape[3],
                data: post,
            };
        }
        if self.config.coord_all() > 0 {
            h = add_coord_channels(&h);
        }
        let (out, head) = self.head.forward(&h);
        let l = self.config.latent_dim;
        let mut mu = Vec::with_capacity(x.n * l);
        let mut log_sigma = Vec::with_capacity(x.n * l);
        for b in 0..x.n {
            let s = out.sample(b);
            mu.extend_from_slice(&s[..l]);
            log_sigma.extend_from_slice(&s[l..]);
        }
        Ok((
            LatentPosterior {
                batch: x.n,
                dim: l,
                mu,
                log_sigma,
            },
            EncoderTape {
                layers,
                head,
                n: x.n,
            },
        ))
    }

    /// Posterior `q(z|x)` for a `[B, 1, R, R]` batch.
    pub fn encode(&self, x: &Tensor<T>) -> Result<LatentPosterior<T>> {
        self.encode_tape(x).map(|(p, _)| p)
    }

    /// Backpropagates head gradients through the encoder. Returns the
    /// gradient with respect to the image channel when `need_input`.
    pub(crate) fn encoder_backward(
        &self,
        tape: &EncoderTape<T>,
        dmu: &[T],
        dlog_sigma: &[T],
        mut grads: Option<&mut ModelParams<T>>,
        mode: BackpropMode,
        need_input: bool,
    ) -> Option<Tensor<T>> {
        let l = self.config.latent_dim;
        let n = tape.n;
        let mut dout = Tensor::zeros(n, 2 * l, 1, 1);
        for b in 0..n {
            dout.data[b * 2 * l..b * 2 * l + l].copy_from_slice(&dmu[b * l..(b + 1) * l]);
            dout.data[b * 2 * l + l..(b + 1) * 2 * l].copy_from_slice(&dlog_sigma[b * l..(b + 1) * l]);
        }
        let depth = self.encoder.len();
        let mut dh = self
            .head
            .backward(
                &tape.head,
                &dout,
                grads.as_deref_mut().map(|g| &mut g.head),
                true,
            )
            .expect("input gradient requested");
        if self.config.coord_all() > 0 {
            dh = strip_coord_channels(&dh);
        }
        let slope = self.slope();
        for i in (0..depth).rev() {
            let (cache, pre, _) = &tape.layers[i];
            leaky_relu_backward(pre, &mut dh.data, slope, mode);
            let want_input = i > 0 || need_input;
            let dx = self.encoder[i].backward(
                cache,
                &dh,
                grads.as_deref_mut().map(|g| &mut g.encoder[i]),
                want_input,
            );
            {
                let mut dx = dx?;
                if self.config.coord_extra(i == 0) > 0 {
                    dx = strip_coord_channels(&dx);
                }
                dh = dx;
            }
        }
        Some(dh)
    }

    pub(crate) fn decode_tape(&self, z: &[T]) -> Result<(Tensor<T>, DecoderTape<T>)> {
        let l = self.config.latent_dim;
        if z.is_empty() || !z.len().is_multiple_of(l) {
            return invalid(format!(
                "latent batch length {} is not a positive multiple of latent_dim {l}",
                z.len()
            ));
        }
        let n = z.len() / l;
        let slope = self.slope();
        let last = self.decoder.len() - 1;
        let mut h = Tensor::from_vec(n, l, 1, 1, z.to_vec())?;
        let mut layers = Vec::with_capacity(self.decoder.len());
        for (j, conv) in self.decoder.iter().enumerate() {
            if self.config.coord_all() > 0 {
                h = add_coord_channels(&h);
            }
            let (pre, cache) = conv.forward(&h);
            let shape = pre.shape();
            if j == last {
                layers.push((cache, Vec::new(), shape));
                h = pre;
            } else {
                let mut post = pre.data.clone();
                leaky_relu_forward(&mut post, slope);
                layers.push((cache, pre.data, shape));
                h = Tensor {
                    n,
                    c: shape[1],
                    h: shape[2],
                    w: shape[3],
                    data: post,
                };
            }
        }
        Ok((h, DecoderTape { layers, n }))
    }

    /// Reconstruction `g(z)` as a `[B, 1, R, R]` batch.
    pub fn decode(&self, z: &[T]) -> Result<Tensor<T>> {
        self.decode_tape(z).map(|(x, _)| x)
    }

    /// Returns `dL/dz` (flattened `[B, latent_dim]`).
    pub(crate) fn decoder_backward(
        &self,
        tape: &DecoderTape<T>,
        dx_hat: &Tensor<T>,
        mut grads: Option<&mut ModelParams<T>>,
        mode: BackpropMode,
    ) -> Vec<T> {
        let slope = self.slope();
        let last = self.decoder.len() - 1;
        let mut dh = dx_hat.clone();
        for j in (0..=last).rev() {
            let (cache, pre, _) = &tape.layers[j];
            if j != last {
                leaky_relu_backward(pre, &mut dh.data, slope, mode);
            }
            let mut dx = self.decoder[j]
                .backward(cache, &dh, grads.as_deref_mut().map(|g| &mut g.decoder[j]), true)
                .expect("input gradient requested");
            if self.config.coord_all() > 0 {
                dx = strip_coord_channels(&dx);
            }
            dh = dx;
        }
        debug_assert_eq!(dh.n, tape.n);
        dh.data
    }

    /// Sign pattern of every encoder rectifier input for `x`. The encoder
    /// is smooth in any neighbourhood where this pattern stays constant.
    pub fn encoder_signature(&self, x: &Tensor<T>) -> Result<Vec<bool>> {
        let (_, tape) = self.encode_tape(x)?;
        Ok(tape.signs().collect())
    }

    /// Stochastic VAE pass: `z ~ q(z|x)` via the reparameterization trick.
    pub fn forward_vae(&self, x: &Tensor<T>, rng: &mut Rng) -> Result<VaeForward<T>> {
        let posterior = self.encode(x)?;
        let eps = standard_normal::<T>(rng, posterior.mu.len());
        let z = reparameterize(&posterior, &eps)?;
        let x_hat = self.decode(&z)?;
        Ok(VaeForward {
            x_hat,
            posterior,
            z,
        })
    }

    /// Deterministic context-encoder pass through the mean head only.
    pub fn forward_ce(&self, x_masked: &Tensor<T>) -> Result<Tensor<T>> {
        let posterior = self.encode(x_masked)?;
        self.decode(&posterior.mu)
    }
}
