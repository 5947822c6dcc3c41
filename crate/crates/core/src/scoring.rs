//! Anomaly scores.
//!
//! * Slice level: `L_KL + L_rec_VAE`, the approximate negative ELBO.
//! * Pixel level: `|x - g(f_mu(x))|` multiplied elementwise with the
//!   Gaussian-smoothed magnitude of a SmoothGrad-averaged, guided
//!   backpropagation of `L_KL` onto the input.

use std::fs;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{read_slice, write_slice, Grid, Image, SliceSample};
use crate::error::{invalid, CevaeError, Result};
use crate::model::{batch_from_images, reparameterize, standard_normal, BackpropMode, ModelParams, Tensor};
use crate::objectives::{kl_grad, kl_per_sample, l1_per_sample};
use crate::real::Real;
use crate::rng::{stream, Rng};

/// Pixel map in double precision.
pub type Map = Grid<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    /// Higher is more anomalous.
    pub value: f64,
    pub l_kl: f64,
    pub l_rec_vae: f64,
}

impl SampleScore {
    pub fn new(l_kl: f64, l_rec_vae: f64) -> Self {
        SampleScore {
            value: l_kl + l_rec_vae,
            l_kl,
            l_rec_vae,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelScoreMap {
    pub scores: Map,
    pub rec_err: Map,
    pub kl_grad: Map,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionMode {
    Vanilla,
    Guided,
    #[default]
    SmoothGuided,
}

/// Which loss is backpropagated onto the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionTarget {
    #[default]
    Kl,
    /// `L_KL + L_rec_VAE` with the reconstruction through `z = mu`.
    Elbo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributionConfig {
    pub mode: AttributionMode,
    pub smoothgrad_n: usize,
    /// Absolute noise level; `None` means 5% of the input's value range.
    pub smoothgrad_sigma: Option<f64>,
    pub smoothing_sigma_px: f64,
    pub target: AttributionTarget,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            mode: AttributionMode::SmoothGuided,
            smoothgrad_n: 16,
            smoothgrad_sigma: None,
            smoothing_sigma_px: 2.0,
            target: AttributionTarget::Kl,
        }
    }
}

impl AttributionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.smoothgrad_n == 0 {
            return invalid("smoothgrad_n must be >= 1");
        }
        if self.smoothgrad_sigma.is_some_and(|s| !(s >= 0.0)) || !(self.smoothing_sigma_px >= 0.0) {
            return invalid("attribution sigmas must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreConfig {
    /// Average the reconstruction term over this many sampled `z` instead
    /// of using `z = mu`.
    pub mc_samples: Option<usize>,
}

/// Slice scores for a batch, evaluated at `z = mu` unless `cfg.mc_samples`
/// is set.
pub fn sample_scores<T: Real>(
    params: &ModelParams<T>,
    x: &Tensor<T>,
    cfg: &ScoreConfig,
    rng: &mut Rng,
) -> Result<Vec<SampleScore>> {
    let post = params.encode(x)?;
    let kl = kl_per_sample(&post);
    let rec = match cfg.mc_samples {
        None | Some(0) => l1_per_sample(x, &params.decode(&post.mu)?)?,
        Some(k) => {
            let mut acc = vec![0.0; x.n];
            for _ in 0..k {
                let eps = standard_normal::<T>(rng, post.mu.len());
                let z = reparameterize(&post, &eps)?;
                for (a, r) in acc.iter_mut().zip(l1_per_sample(x, &params.decode(&z)?)?) {
                    *a += r / k as f64;
                }
            }
            acc
        }
    };
    Ok(kl.into_iter().zip(rec).map(|(k, r)| SampleScore::new(k, r)).collect())
}

/// Single-slice convenience wrapper around [`sample_scores`].
pub fn sample_score<T: Real>(
    params: &ModelParams<T>,
    image: &Image,
    cfg: &ScoreConfig,
    rng: &mut Rng,
) -> Result<SampleScore> {
    let x = batch_from_images::<T>(&[image])?;
    Ok(sample_scores(params, &x, cfg, rng)?[0])
}

/// Gradient of each sample's own loss with respect to its input pixels
/// (`[B, 1, H, W]`). Guided mode applies the guided rule at every
/// rectifier on the way back.
pub fn backprop_to_input<T: Real>(
    params: &ModelParams<T>,
    x: &Tensor<T>,
    target: AttributionTarget,
    mode: BackpropMode,
) -> Result<Tensor<T>> {
    let (post, etape) = params.encode_tape(x)?;
    let (mut dmu, dls) = kl_grad(&post, T::ONE);
    let mut direct = None;
    if target == AttributionTarget::Elbo {
        let (x_hat, dtape) = params.decode_tape(&post.mu)?;
        let dx_hat = Tensor {
            n: x.n,
            c: 1,
            h: x.h,
            w: x.w,
            data: x_hat
                .data
                .iter()
                .zip(&x.data)
                .map(|(&a, &b)| (a - b).signum_or_zero())
                .collect(),
        };
        let dz = params.decoder_backward(&dtape, &dx_hat, None, mode);
        for (m, d) in dmu.iter_mut().zip(dz) {
            *m += d;
        }
        // d|x - x_hat| / dx through the direct path
        direct = Some(dx_hat.data.iter().map(|&s| -s).collect::<Vec<T>>());
    }
    let mut dx = params
        .encoder_backward(&etape, &dmu, &dls, None, mode, true)
        .expect("input gradient requested");
    if let Some(direct) = direct {
        for (g, d) in dx.data.iter_mut().zip(direct) {
            *g += d;
        }
    }
    if !dx.is_finite() {
        return Err(CevaeError::Numeric("non-finite input gradient".into()));
    }
    Ok(dx)
}

/// Mean of `grad_fn` over `n` copies of the single-sample `x`, each
/// perturbed with iid `N(0, sigma^2)` noise. All copies are evaluated as one
/// batch. With `sigma == 0` the copies coincide and `grad_fn(x)` is returned.
pub fn smoothgrad<T, F>(mut grad_fn: F, x: &Tensor<T>, n: usize, sigma: f64, rng: &mut Rng) -> Result<Tensor<T>>
where
    T: Real,
    F: FnMut(&Tensor<T>) -> Result<Tensor<T>>,
{
    if n == 0 {
        return invalid("smoothgrad needs n >= 1");
    }
    if !(sigma >= 0.0) {
        return invalid("smoothgrad sigma must be >= 0");
    }
    if x.n != 1 {
        return invalid("smoothgrad operates on a single sample");
    }
    if sigma == 0.0 {
        return grad_fn(x);
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let mut data = Vec::with_capacity(n * x.data.len());
    for _ in 0..n {
        data.extend(x.data.iter().map(|&v| v + T::from_f64(normal.sample(rng))));
    }
    let noisy = Tensor::from_vec(n, x.c, x.h, x.w, data)?;
    let grads = grad_fn(&noisy)?;
    if grads.n != n || grads.sample_len() != x.sample_len() {
        return invalid("smoothgrad: gradient function changed the batch shape");
    }
    let mut mean = vec![0.0f64; x.data.len()];
    for b in 0..n {
        for (m, &g) in mean.iter_mut().zip(grads.sample(b)) {
            *m += g.to_f64();
        }
    }
    Tensor::from_vec(
        1,
        x.c,
        x.h,
        x.w,
        mean.into_iter().map(|m| T::from_f64(m / n as f64)).collect(),
    )
}

/// Normalized, truncated (radius `ceil(4 sigma)`) Gaussian kernel.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as usize;
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-0.5 * d * d / (sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Half-sample symmetric reflection (`d c b a | a b c d`), periodic with
/// period `2n`.
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Separable Gaussian blur with reflective borders. The kernel is
/// symmetric and normalized, so together with the reflection the total
/// sum of the map is preserved.
pub fn gaussian_smooth(map: &Map, sigma_px: f64) -> Result<Map> {
    if !(sigma_px >= 0.0) {
        return invalid("smoothing sigma must be >= 0");
    }
    if sigma_px == 0.0 || map.is_empty() {
        return Ok(map.clone());
    }
    let k = gaussian_kernel(sigma_px);
    let r = (k.len() / 2) as isize;
    let (h, w) = map.shape();
    let rows = Map::from_fn(h, w, |y, x| {
        k.iter()
            .enumerate()
            .map(|(i, &kv)| kv * map.get(y, reflect(x as isize + i as isize - r, w)))
            .sum()
    });
    Ok(Map::from_fn(h, w, |y, x| {
        k.iter()
            .enumerate()
            .map(|(i, &kv)| kv * rows.get(reflect(y as isize + i as isize - r, h), x))
            .sum()
    }))
}

fn value_range(image: &Image) -> f64 {
    let (lo, hi) = image
        .as_slice()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    (hi - lo) as f64
}

/// Pixel-wise anomaly map for one preprocessed slice. The reconstruction
/// uses the clean input and the deterministic mean path.
pub fn pixel_score<T: Real>(
    params: &ModelParams<T>,
    image: &Image,
    cfg: &AttributionConfig,
    rng: &mut Rng,
) -> Result<PixelScoreMap> {
    cfg.validate()?;
    let x = batch_from_images::<T>(&[image])?;
    let (h, w) = image.shape();
    let x_hat = params.forward_ce(&x)?;
    let rec_err = Map::from_vec(
        h,
        w,
        x.data
            .iter()
            .zip(&x_hat.data)
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .collect(),
    )?;
    let (mode, n, sigma) = match cfg.mode {
        AttributionMode::Vanilla => (BackpropMode::Vanilla, 1, 0.0),
        AttributionMode::Guided => (BackpropMode::Guided, 1, 0.0),
        AttributionMode::SmoothGuided => (
            BackpropMode::Guided,
            cfg.smoothgrad_n,
            cfg.smoothgrad_sigma.unwrap_or(0.05 * value_range(image)),
        ),
    };
    let grad = smoothgrad(
        |xb: &Tensor<T>| backprop_to_input(params, xb, cfg.target, mode),
        &x,
        n,
        sigma,
        rng,
    )?;
    let magnitude = Map::from_vec(h, w, grad.data.iter().map(|g| g.to_f64().abs()).collect())?;
    let kl_grad = gaussian_smooth(&magnitude, cfg.smoothing_sigma_px)?;
    let scores = Map::from_vec(
        h,
        w,
        rec_err
            .as_slice()
            .iter()
            .zip(kl_grad.as_slice())
            .map(|(a, b)| a * b)
            .collect(),
    )?;
    Ok(PixelScoreMap {
        scores,
        rec_err,
        kl_grad,
    })
}

/// Both scores for one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceScores {
    pub patient_id: String,
    pub slice_index: usize,
    pub sample: SampleScore,
    pub pixel: PixelScoreMap,
}

/// Scores every slice. Each slice draws from its own stream keyed by
/// `(seed, patient_id, slice_index)`, so results do not depend on
/// parallel scheduling or ordering.
pub fn score_samples<T: Real>(
    params: &ModelParams<T>,
    samples: &[SliceSample],
    attribution: &AttributionConfig,
    score_cfg: &ScoreConfig,
    seed: u64,
) -> Result<Vec<SliceScores>> {
    samples
        .par_iter()
        .map(|s| {
            let idx = s.slice_index.to_le_bytes();
            let mut rng = stream(seed, &[b"score", s.patient_id.as_bytes(), &idx]);
            let sample = sample_score(params, &s.image, score_cfg, &mut rng)?;
            let pixel = pixel_score(params, &s.image, attribution, &mut rng)?;
            Ok(SliceScores {
                patient_id: s.patient_id.clone(),
                slice_index: s.slice_index,
                sample,
                pixel,
            })
        })
        .collect()
}

pub const SCORES_CSV: &str = "scores.csv";
pub const MAPS_DIR: &str = "maps";

fn map_file(patient_id: &str, slice_index: usize) -> PathBuf {
    PathBuf::from(MAPS_DIR).join(format!("{patient_id}_{slice_index:04}.cevs"))
}

fn to_image(map: &Map) -> Image {
    map.map(|v| v as f32)
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    patient_id: String,
    slice_index: usize,
    sample_score: f64,
    l_kl: f64,
    l_rec_vae: f64,
}

/// Writes `scores.csv` plus one float32 pixel map per slice under `maps/`,
/// and optionally 8-bit PNG heatmaps under `png/`.
pub fn write_score_dir(dir: impl AsRef<Path>, results: &[SliceScores], png: bool) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join(MAPS_DIR)).map_err(|e| CevaeError::io(dir, e))?;
    let csv_path = dir.join(SCORES_CSV);
    let mut w = csv::Writer::from_path(&csv_path)?;
    for r in results {
        w.serialize(ScoreRow {
            patient_id: r.patient_id.clone(),
            slice_index: r.slice_index,
            sample_score: r.sample.value,
            l_kl: r.sample.l_kl,
            l_rec_vae: r.sample.l_rec_vae,
        })?;
        write_slice(dir.join(map_file(&r.patient_id, r.slice_index)), &to_image(&r.pixel.scores))?;
        if png {
            let path = dir
                .join("png")
                .join(format!("{}_{:04}.png", r.patient_id, r.slice_index));
            write_heatmap_png(&path, &r.pixel.scores)?;
        }
    }
    w.flush().map_err(|e| CevaeError::io(&csv_path, e))?;
    Ok(())
}

/// Scores read back from a score directory.
#[derive(Debug, Clone)]
pub struct ScoreDump {
    pub rows: Vec<(String, usize, SampleScore)>,
    pub maps: Vec<Image>,
}

pub fn read_score_dir(dir: impl AsRef<Path>) -> Result<ScoreDump> {
    let dir = dir.as_ref();
    let csv_path = dir.join(SCORES_CSV);
    if !csv_path.is_file() {
        return Err(CevaeError::MissingFile(csv_path));
    }
    let mut reader = csv::Reader::from_path(&csv_path)?;
    let mut rows = Vec::new();
    let mut maps = Vec::new();
    for row in reader.deserialize::<ScoreRow>() {
        let row = row?;
        maps.push(read_slice(dir.join(map_file(&row.patient_id, row.slice_index)))?);
        rows.push((
            row.patient_id,
            row.slice_index,
            SampleScore {
                value: row.sample_score,
                l_kl: row.l_kl,
                l_rec_vae: row.l_rec_vae,
            },
        ));
    }
    Ok(ScoreDump { rows, maps })
}

/// Black-red-yellow-white heatmap scaled to the map's maximum.
pub fn write_heatmap_png(path: &Path, map: &Map) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CevaeError::io(parent, e))?;
    }
    let max = map.as_slice().iter().cloned().fold(0.0f64, f64::max);
    let mut rgb = Vec::with_capacity(map.len() * 3);
    for &v in map.as_slice() {
        let t = if max > 0.0 { (v / max).clamp(0.0, 1.0) } else { 0.0 };
        let ch = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
        rgb.extend_from_slice(&[ch(3.0 * t), ch(3.0 * t - 1.0), ch(3.0 * t - 2.0)]);
    }
    let file = fs::File::create(path).map_err(|e| CevaeError::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), map.width() as u32, map.height() as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| CevaeError::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(&rgb).map_err(to_io)?;
    writer.finish().map_err(to_io)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Conv2d, ModelConfig};
    use crate::rng::seeded;
    use rand::Rng as _;

    fn tiny(slope: f64) -> ModelParams<f64> {
        let cfg = ModelConfig {
            resolution: 16,
            channels: vec![3, 4],
            latent_dim: 5,
            leaky_slope: slope,
            ..Default::default()
        };
        ModelParams::init(&cfg, &mut seeded(11)).unwrap()
    }

    fn img(seed: u64) -> Image {
        let mut rng = seeded(seed);
        Image::from_fn(16, 16, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn sample_score_bookkeeping() {
        let s = SampleScore::new(1.25, 3.5);
        assert_eq!(s.value, 4.75);
        assert_eq!(SampleScore::new(0.0, 0.0).value, 0.0);
        let p = tiny(0.01);
        let a = sample_score(&p, &img(1), &ScoreConfig::default(), &mut seeded(0)).unwrap();
        let b = sample_score(&p, &img(1), &ScoreConfig::default(), &mut seeded(99)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.value, a.l_kl + a.l_rec_vae);
        let mc = sample_score(&p, &img(1), &ScoreConfig { mc_samples: Some(4) }, &mut seeded(0)).unwrap();
        assert_eq!(mc.l_kl, a.l_kl);
        assert_ne!(mc.l_rec_vae, a.l_rec_vae);
    }

    #[test]
    fn perfect_model_scores_zero() {
        // posterior equal to the prior and exact reconstruction
        use crate::model::LatentPosterior;
        let post = LatentPosterior::new(3, vec![0.0; 3], vec![0.0; 3]).unwrap();
        let x = Tensor::from_vec(1, 1, 2, 2, vec![0.5, 1.0, -1.0, 0.0]).unwrap();
        let s = SampleScore::new(kl_per_sample(&post)[0], l1_per_sample(&x, &x).unwrap()[0]);
        assert_eq!(s.value, 0.0);
    }

    #[test]
    fn guided_equals_vanilla_without_rectifiers() {
        let p = tiny(1.0);
        let x = batch_from_images::<f64>(&[&img(2)]).unwrap();
        let v = backprop_to_input(&p, &x, AttributionTarget::Kl, BackpropMode::Vanilla).unwrap();
        let g = backprop_to_input(&p, &x, AttributionTarget::Kl, BackpropMode::Guided).unwrap();
        assert_eq!(v, g);
        let p = tiny(0.01);
        let v = backprop_to_input(&p, &x, AttributionTarget::Kl, BackpropMode::Vanilla).unwrap();
        let g = backprop_to_input(&p, &x, AttributionTarget::Kl, BackpropMode::Guided).unwrap();
        assert_ne!(v, g);
    }

    #[test]
    fn batched_input_gradients_are_per_sample() {
        let p = tiny(0.01);
        let a = batch_from_images::<f64>(&[&img(3)]).unwrap();
        let b = batch_from_images::<f64>(&[&img(4)]).unwrap();
        let ab = batch_from_images::<f64>(&[&img(3), &img(4)]).unwrap();
        let ga = backprop_to_input(&p, &a, AttributionTarget::Elbo, BackpropMode::Guided).unwrap();
        let gb = backprop_to_input(&p, &b, AttributionTarget::Elbo, BackpropMode::Guided).unwrap();
        let gab = backprop_to_input(&p, &ab, AttributionTarget::Elbo, BackpropMode::Guided).unwrap();
        for (x, y) in gab.data.iter().zip(ga.data.iter().chain(&gb.data)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    /// Two-layer toy network `y = sum_j v_j * lrelu(sum_i W_ji x_i)`. The
    /// guided input gradient must equal the sum over exactly those paths
    /// `i -> j -> y` whose hidden unit has a positive pre-activation and a
    /// positive upstream gradient `v_j`.
    #[test]
    fn guided_toy_network_path_enumeration() {
        use crate::model::layers::{leaky_relu_backward, leaky_relu_forward};
        let mut rng = seeded(5);
        let (n_in, n_hidden) = (6, 8);
        let mut l1 = Conv2d::<f64>::zeros(n_in, n_hidden, 1, 1, 0);
        let mut l2 = Conv2d::<f64>::zeros(n_hidden, 1, 1, 1, 0);
        l1.weight.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        l2.weight.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        let x = Tensor::from_vec(1, n_in, 1, 1, (0..n_in).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (pre, c1) = l1.forward(&x);
        let mut hidden = pre.clone();
        leaky_relu_forward(&mut hidden.data, 0.01);
        let (_, c2) = l2.forward(&hidden);
        let dy = Tensor::from_vec(1, 1, 1, 1, vec![1.0]).unwrap();
        let mut dh = l2.backward(&c2, &dy, None, true).unwrap();
        leaky_relu_backward(&pre.data, &mut dh.data, 0.01, BackpropMode::Guided);
        let dx = l1.backward(&c1, &dh, None, true).unwrap();

        let mut open_paths = 0;
        for i in 0..n_in {
            let mut want = 0.0;
            for j in 0..n_hidden {
                let v = l2.weight[j];
                if pre.data[j] > 0.0 && v > 0.0 {
                    want += l1.weight[j * n_in + i] * v;
                    open_paths += 1;
                }
            }
            assert!((dx.data[i] - want).abs() < 1e-12);
        }
        // the toy net must exercise both open and closed paths
        assert!(open_paths > 0 && open_paths < n_in * n_hidden);
    }

    #[test]
    fn smoothgrad_cases() {
        let x = batch_from_images::<f64>(&[&img(6)]).unwrap();
        let p = tiny(0.01);
        let f = |xb: &Tensor<f64>| backprop_to_input(&p, xb, AttributionTarget::Kl, BackpropMode::Guided);
        let plain = f(&x).unwrap();
        for n in [1, 3, 16] {
            assert_eq!(smoothgrad(f, &x, n, 0.0, &mut seeded(0)).unwrap(), plain);
        }
        let a = smoothgrad(f, &x, 4, 0.1, &mut seeded(7)).unwrap();
        let b = smoothgrad(f, &x, 4, 0.1, &mut seeded(7)).unwrap();
        assert_eq!(a, b);
        assert!(smoothgrad(f, &x, 0, 0.1, &mut seeded(7)).is_err());
        assert!(smoothgrad(f, &x, 2, -0.1, &mut seeded(7)).is_err());

        // d/dx of 0.5 * sum x^2 is x itself: the noisy mean must approach x
        let identity = |xb: &Tensor<f64>| Ok(xb.clone());
        let sigma = 0.5;
        let n = 4000;
        let m = smoothgrad(identity, &x, n, sigma, &mut seeded(8)).unwrap();
        let tol = 4.0 * sigma / (n as f64).sqrt();
        for (a, b) in m.data.iter().zip(&x.data) {
            assert!((a - b).abs() < tol);
        }
    }

    #[test]
    fn gaussian_smooth_cases() {
        let mut rng = seeded(9);
        let map = Map::from_fn(20, 17, |_, _| rng.random_range(0.0..5.0));
        assert_eq!(gaussian_smooth(&map, 0.0).unwrap(), map);
        for sigma in [0.5, 2.0, 7.0] {
            let out = gaussian_smooth(&map, sigma).unwrap();
            let s0: f64 = map.as_slice().iter().sum();
            let s1: f64 = out.as_slice().iter().sum();
            assert!((s0 - s1).abs() < 1e-6, "sigma {sigma}: {s0} vs {s1}");
        }
        let mut delta = Map::filled(21, 21, 0.0);
        delta.set(10, 10, 1.0);
        let out = gaussian_smooth(&delta, 2.0).unwrap();
        let max = out.as_slice().iter().cloned().fold(0.0, f64::max);
        assert_eq!(out.get(10, 10), max);
        assert!((out.get(10, 12) - out.get(10, 8)).abs() < 1e-15);
        assert!((out.get(10, 12) - out.get(12, 10)).abs() < 1e-15);
        let ratio = out.get(10, 12) / out.get(10, 10);
        assert!((ratio - (-0.5f64).exp()).abs() < 1e-12);
        assert!(gaussian_smooth(&map, -1.0).is_err());
    }

    #[test]
    fn pixel_score_properties() {
        let p = tiny(0.01);
        let cfg = AttributionConfig { smoothgrad_n: 4, ..Default::default() };
        let a = pixel_score(&p, &img(10), &cfg, &mut seeded(1)).unwrap();
        let b = pixel_score(&p, &img(10), &cfg, &mut seeded(1)).unwrap();
        assert_eq!(a, b);
        assert!(a.scores.as_slice().iter().all(|v| v.is_finite() && *v >= 0.0));
        for ((s, r), k) in a.scores.as_slice().iter().zip(a.rec_err.as_slice()).zip(a.kl_grad.as_slice()) {
            assert_eq!(*s, r * k);
        }
        // exact reconstruction makes the fused map vanish
        let mut zero_decoder = p.clone();
        let last = zero_decoder.decoder.len() - 1;
        zero_decoder.decoder[last].weight.iter_mut().for_each(|w| *w = 0.0);
        zero_decoder.decoder[last].bias.iter_mut().for_each(|w| *w = 0.0);
        let flat = Image::filled(16, 16, 0.0);
        let z = pixel_score(&zero_decoder, &flat, &cfg, &mut seeded(2)).unwrap();
        assert!(z.rec_err.as_slice().iter().all(|&v| v == 0.0));
        assert!(z.scores.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn score_samples_order_invariant_and_dump_round_trip() {
        use crate::data::Split;
        let p = tiny(0.01);
        let samples: Vec<SliceSample> = (0..3)
            .map(|i| SliceSample {
                patient_id: format!("p{}", i % 2),
                slice_index: i,
                image: img(20 + i as u64),
                mask: None,
                split: Split::Test,
            })
            .collect();
        let cfg = AttributionConfig { smoothgrad_n: 2, ..Default::default() };
        let fwd = score_samples(&p, &samples, &cfg, &ScoreConfig::default(), 5).unwrap();
        let mut rev_in = samples.clone();
        rev_in.reverse();
        let mut rev = score_samples(&p, &rev_in, &cfg, &ScoreConfig::default(), 5).unwrap();
        rev.reverse();
        assert_eq!(fwd, rev);

        let dir = tempfile::tempdir().unwrap();
        write_score_dir(dir.path(), &fwd, true).unwrap();
        let dump = read_score_dir(dir.path()).unwrap();
        assert_eq!(dump.rows.len(), 3);
        assert_eq!(dump.rows[1].0, "p1");
        assert_eq!(dump.rows[1].2, fwd[1].sample);
        assert_eq!(dump.maps[2], to_image(&fwd[2].pixel.scores));
        assert!(dir.path().join("png/p0_0000.png").is_file());
        let header = fs::read_to_string(dir.path().join(SCORES_CSV)).unwrap();
        assert!(header.starts_with("patient_id,slice_index,sample_score,l_kl,l_rec_vae\n"));
    }
}
