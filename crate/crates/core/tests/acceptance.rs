//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line naming its
//! criterion, then asserts.

mod common;

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use cevae::data::{generate_phantoms, load_manifest, load_samples, Mask, PhantomConfig, PreprocessConfig, Split};
use cevae::evaluation::{dice, dice_cv, evaluate, roc_auc, DiceCvConfig, EvalConfig, EvalReport};
use cevae::model::{batch_from_images, load_checkpoint, standard_normal, BackpropMode, LatentPosterior, ModelConfig, ModelParams};
use cevae::objectives::{cevae_loss, kl_std_normal, ModelKind};
use cevae::rng::seeded;
use cevae::scoring::{
    backprop_to_input, gaussian_smooth, read_score_dir, score_samples, smoothgrad, write_score_dir, AttributionConfig,
    AttributionTarget, Map, ScoreConfig,
};
use cevae::trainer::{factor_sweep, read_losses, train, SweepConfig, TrainConfig, BEST_CHECKPOINT, LOSSES_CSV};
use common::{check_input_gradient, check_param_gradients, random_images, small_config, Problem};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

fn report(name: &str, ok: bool, detail: String) {
    // direct write so the line survives the harness's output capture
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "acceptance {name}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
}

#[test]
fn kl_oracle() {
    let start = Instant::now();
    let mut rng = seeded(1);
    let (n_post, dim, n_mc) = (100, 8, 100_000);
    let mut worst_z: f64 = 0.0;
    let mut outside = 0;
    let mut zs = Vec::with_capacity(n_post);
    for _ in 0..n_post {
        let mu: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ls: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.0)).collect();
        let closed = kl_std_normal(&LatentPosterior::new(dim, mu.clone(), ls.clone()).unwrap()).unwrap();
        // log q(z) - log p(z) at z = mu + sigma * e, normalizers cancel
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..n_mc {
            let mut v = 0.0;
            for d in 0..dim {
                let e: f64 = StandardNormal.sample(&mut rng);
                let z = mu[d] + ls[d].exp() * e;
                v += -ls[d] - 0.5 * e * e + 0.5 * z * z;
            }
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n_mc as f64;
        let se = ((sum_sq / n_mc as f64 - mean * mean) / n_mc as f64).sqrt();
        let signed = (mean - closed) / se;
        zs.push(signed);
        let z = signed.abs();
        worst_z = worst_z.max(z);
        if z > 3.0 {
            outside += 1;
        }
    }
    let z_mean = zs.iter().sum::<f64>() / n_post as f64;
    let z_sd = (zs.iter().map(|z| (z - z_mean).powi(2)).sum::<f64>() / (n_post - 1) as f64).sqrt();
    let zero = kl_std_normal(&LatentPosterior::new(16, vec![0.0f64; 16], vec![0.0; 16]).unwrap()).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    // a biased closed form would also shift or widen the z distribution
    let z_ok = z_mean.abs() < 3.0 / (n_post as f64).sqrt() && (z_sd - 1.0).abs() < 0.25;
    let ok = outside == 0 && z_ok && zero == 0.0 && elapsed < 60.0;
    report(
        "kl_oracle",
        ok,
        format!(
            "{outside}/{n_post} beyond 3 SE, worst {worst_z:.2} SE, z mean {z_mean:.3} sd {z_sd:.3}, KL at prior = {zero}, {elapsed:.1}s"
        ),
    );
    assert!(ok);
}

#[test]
fn gradient_checks() {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut ok = true;
    for (i, factor) in [0.0, 0.5, 1.0].into_iter().enumerate() {
        let problem = Problem::new(ModelKind::CeVae, factor, 10 + i as u64);
        let params = check_param_gradients(&problem, 50, 20 + i as u64);
        let img = random_images(&mut seeded(30 + i as u64), 1, small_config().resolution).remove(0);
        let input = check_input_gradient(&problem.params, &img);
        ok &= params.passed() && params.checked == 50 && input.passed() && input.checked > 0;
        lines.push(format!(
            "factor {factor}: params [{}], input [{}]",
            params.summary(),
            input.summary()
        ));
        if !params.passed() {
            lines.push(format!("worst {}", params.worst));
        }
        if !input.passed() {
            lines.push(format!("worst {}", input.worst));
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    ok &= elapsed < 300.0;
    report("gradient_checks", ok, format!("{}; {elapsed:.1}s", lines.join("; ")));
    assert!(ok);
}

#[test]
fn attribution_correctness() {
    let mut rng = seeded(77);
    // purely linear network: every rectifier has slope 1
    let linear = ModelConfig {
        leaky_slope: 1.0,
        ..small_config()
    };
    let p = ModelParams::<f64>::init(&linear, &mut rng).unwrap();
    let imgs = random_images(&mut rng, 3, linear.resolution);
    let x = batch_from_images::<f64>(&imgs.iter().collect::<Vec<_>>()).unwrap();
    let mut guided_exact = true;
    for target in [AttributionTarget::Kl, AttributionTarget::Elbo] {
        let v = backprop_to_input(&p, &x, target, BackpropMode::Vanilla).unwrap();
        let g = backprop_to_input(&p, &x, target, BackpropMode::Guided).unwrap();
        guided_exact &= v == g;
    }

    let p = ModelParams::<f64>::init(&small_config(), &mut rng).unwrap();
    let single = batch_from_images::<f64>(&[&imgs[0]]).unwrap();
    let grad = |xb: &cevae::model::Tensor<f64>| backprop_to_input(&p, xb, AttributionTarget::Kl, BackpropMode::Guided);
    let plain = grad(&single).unwrap();
    let mut smooth_exact = true;
    for n in [1, 4, 16] {
        smooth_exact &= smoothgrad(grad, &single, n, 0.0, &mut seeded(n as u64)).unwrap() == plain;
    }

    let mut worst: f64 = 0.0;
    for (h, w) in [(64, 64), (16, 9), (5, 3), (1, 7)] {
        for sigma in [0.5, 1.0, 2.0, 4.0, 10.0] {
            let map = Map::from_fn(h, w, |_, _| rng.random_range(0.0..10.0));
            let out = gaussian_smooth(&map, sigma).unwrap();
            let s0: f64 = map.as_slice().iter().sum();
            let s1: f64 = out.as_slice().iter().sum();
            worst = worst.max((s0 - s1).abs());
        }
    }
    let ok = guided_exact && smooth_exact && worst < 1e-6;
    report(
        "attribution_correctness",
        ok,
        format!(
            "guided == vanilla on linear net: {guided_exact}, SmoothGrad sigma 0 == gradient: {smooth_exact}, max smoothing sum drift {worst:.1e}"
        ),
    );
    assert!(ok);
}

fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1;
                twice += if si > sj {
                    2
                } else if si == sj {
                    1
                } else {
                    0
                };
            }
        }
    }
    twice as f64 / (2 * pairs) as f64
}

fn set_dice(pred: &Mask, gt: &Mask) -> f64 {
    let on = |m: &Mask| -> HashSet<(usize, usize)> {
        let (h, w) = m.shape();
        (0..h)
            .flat_map(|r| (0..w).map(move |c| (r, c)))
            .filter(|&(r, c)| m.get(r, c) != 0)
            .collect()
    };
    let (p, g) = (on(pred), on(gt));
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    2.0 * p.intersection(&g).count() as f64 / (p.len() + g.len()) as f64
}

#[test]
fn metric_oracles() {
    let mut rng = seeded(99);
    let mut auc_mismatch = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..80);
        let levels = rng.random_range(1..30);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_bool(0.4) as u8).collect();
        let a = rng.random_range(0..n);
        let b = (a + 1 + rng.random_range(0..n - 1)) % n;
        labels[a] = 1;
        labels[b] = 0;
        if roc_auc(&scores, &labels).unwrap() != pairwise_auc(&scores, &labels) {
            auc_mismatch += 1;
        }
    }
    let mut dice_mismatch = 0;
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
        let (pp, pg) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let pred = Mask::from_fn(h, w, |_, _| rng.random_bool(pp) as u8);
        let gt = Mask::from_fn(h, w, |_, _| rng.random_bool(pg) as u8);
        if dice(&pred, &gt).unwrap() != set_dice(&pred, &gt) {
            dice_mismatch += 1;
        }
    }
    let mut cv_values = Vec::new();
    for seed in 0..5 {
        let mut maps = Vec::new();
        let mut gts = Vec::new();
        let mut ids = Vec::new();
        for p in 0..12 {
            for s in 0..4 {
                let gt = Mask::from_fn(16, 16, |_, _| (s % 2 == 1 && rng.random_bool(0.1)) as u8);
                maps.push(gt.map(|v| v as f32 * rng.random_range(1.0..2.0)));
                gts.push(gt);
                ids.push(format!("patient-{p}"));
            }
        }
        cv_values.push(dice_cv(&maps, &gts, &ids, &DiceCvConfig::default(), &mut seeded(seed)).unwrap());
    }
    let cv_ok = cv_values.iter().all(|&v| v == 1.0);
    let ok = auc_mismatch == 0 && dice_mismatch == 0 && cv_ok;
    report(
        "metric_oracles",
        ok,
        format!(
            "roc_auc mismatches {auc_mismatch}/1000, dice mismatches {dice_mismatch}/1000, dice_cv on separable maps {cv_values:?}"
        ),
    );
    assert!(ok);
}

#[test]
fn loss_endpoint_identities() {
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let problem = Problem::new(ModelKind::CeVae, 0.0, 40 + seed);
        let p = &problem.params;
        let (x, xm) = (&problem.clean, problem.corrupted.as_ref().unwrap());
        let batch = x.n as f64;

        // VAE objective: closed-form KL plus L1 of the sampled reconstruction
        let eps = standard_normal::<f64>(&mut seeded(seed), x.n * p.config.latent_dim);
        let post = p.encode(x).unwrap();
        let mut kl = 0.0;
        for (m, ls) in post.mu.iter().zip(&post.log_sigma) {
            kl += 0.5 * (m * m + (2.0 * ls).exp() - 1.0 - 2.0 * ls);
        }
        let z: Vec<f64> = (0..eps.len()).map(|i| post.mu[i] + post.log_sigma[i].exp() * eps[i]).collect();
        let x_hat = p.decode(&z).unwrap();
        let rec: f64 = x.data.iter().zip(&x_hat.data).map(|(a, b)| (a - b).abs()).sum();
        let vae = (kl + rec) / batch;
        let at0 = cevae_loss(x, xm, p, &mut seeded(seed), 0.0).unwrap().total;
        worst = worst.max((at0 - vae).abs());

        // CE loss: mean-path reconstruction of the masked input
        let x_hat = p.decode(&p.encode(xm).unwrap().mu).unwrap();
        let ce: f64 = x.data.iter().zip(&x_hat.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / batch;
        let at1 = cevae_loss(x, xm, p, &mut seeded(seed), 1.0).unwrap().total;
        worst = worst.max((at1 - ce).abs());
    }
    let ok = worst <= 1e-9;
    report("loss_endpoint_identities", ok, format!("max deviation {worst:.2e}"));
    assert!(ok);
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

/// Reduced-width network used for the end-to-end run on one CPU core.
fn e2e_model() -> ModelConfig {
    ModelConfig {
        channels: vec![16, 32, 64, 128],
        latent_dim: 128,
        ..Default::default()
    }
}

#[test]
fn synthetic_end_to_end() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let phantoms = PhantomConfig {
        n_patients: 10,
        n_train_patients: 40,
        n_val_patients: 4,
        slices_per_patient: 32,
        anomaly_fraction: 0.5,
        resolution: 64,
        seed: 0,
        ..Default::default()
    };
    generate_phantoms(&phantoms, dir.path()).unwrap();
    let manifest = load_manifest(dir.path().join("manifest.csv")).unwrap();
    let pre = PreprocessConfig::default();
    let get = |s| load_samples(&manifest, &pre, &[s]).unwrap();
    let (tr, va, te) = (get(Split::Train), get(Split::Val), get(Split::Test));
    let cfg = TrainConfig {
        epochs: 15,
        ..Default::default()
    };
    let sweep = SweepConfig {
        factors: vec![0.0, 0.5, 1.0],
        seeds: vec![0, 1, 2],
        ..Default::default()
    };
    let out = tempfile::tempdir().unwrap();
    let res = factor_sweep(&tr, &va, &te, &e2e_model(), &cfg, &sweep, Some(out.path())).unwrap();
    let med = |f: f64, pick: fn(&cevae::evaluation::RunMetrics) -> f64| {
        median(res.rows.iter().filter(|r| r.factor == f).map(|r| pick(&r.metrics)).collect())
    };
    let slice = med(0.5, |m| m.slice_roc_auc);
    let pixel = med(0.5, |m| m.pixel_roc_auc);
    let pixel_vae = med(0.0, |m| m.pixel_roc_auc);
    let pixel_ce = med(1.0, |m| m.pixel_roc_auc);
    let elapsed = start.elapsed().as_secs_f64() / 60.0;
    let ok = slice >= 0.85 && pixel >= 0.80 && pixel >= pixel_vae.max(pixel_ce) - 0.02 && elapsed < 60.0;
    println!("{}", res.to_table());

    // score orderings of the trained ceVAE runs
    let (mut slice_order, mut inside_outside, mut anomalous) = (0, 0, 0);
    for seed in &sweep.seeds {
        let dump = read_score_dir(out.path().join(format!("factor_0.50_seed_{seed}/scores"))).unwrap();
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for (s, (_, _, score)) in te.iter().zip(&dump.rows) {
            if s.has_anomaly() { pos.push(score.value) } else { neg.push(score.value) }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        slice_order += (mean(&pos) > mean(&neg)) as usize;
        for (s, map) in te.iter().zip(&dump.maps) {
            let Some(mask) = s.mask.as_ref().filter(|_| s.has_anomaly()) else { continue };
            let (mut inside, mut outside) = ((0.0, 0), (0.0, 0));
            for (&v, &m) in map.as_slice().iter().zip(mask.as_slice()) {
                let acc = if m != 0 { &mut inside } else { &mut outside };
                acc.0 += v as f64;
                acc.1 += 1;
            }
            anomalous += 1;
            inside_outside += (inside.0 / inside.1 as f64 > outside.0 / outside.1 as f64) as usize;
        }
    }
    let orderings_ok = slice_order == sweep.seeds.len() && inside_outside == anomalous;
    report(
        "score_orderings",
        orderings_ok,
        format!(
            "anomalous slices outscore normal ones in {slice_order}/{} runs; mask interior outscores exterior on {inside_outside}/{anomalous} anomalous slices",
            sweep.seeds.len()
        ),
    );
    let interior_ok = pixel >= pixel_vae && pixel >= pixel_ce;
    report(
        "sweep_interior_factor",
        interior_ok,
        format!("median pixel AUC at 0.5 {pixel:.4} vs endpoints {pixel_vae:.4} / {pixel_ce:.4}"),
    );
    report(
        "synthetic_end_to_end",
        ok,
        format!(
            "ceVAE median slice AUC {slice:.4}, pixel AUC {pixel:.4}; VAE pixel {pixel_vae:.4}, CE pixel {pixel_ce:.4}; {elapsed:.1} min"
        ),
    );
    // the interior-factor line is reported, not asserted: it is not a primary criterion
    assert!(ok && orderings_ok);
}

fn smoke_pipeline(root: &Path) -> (Vec<cevae::trainer::EpochLosses>, EvalReport) {
    let data = root.join("data");
    let phantoms = PhantomConfig {
        n_patients: 4,
        n_train_patients: 4,
        n_val_patients: 1,
        slices_per_patient: 6,
        resolution: 32,
        anomaly_radius_range: (2, 5),
        seed: 5,
        ..Default::default()
    };
    generate_phantoms(&phantoms, &data).unwrap();
    let manifest = load_manifest(data.join("manifest.csv")).unwrap();
    let model = ModelConfig {
        resolution: 16,
        channels: vec![4, 8],
        latent_dim: 8,
        ..Default::default()
    };
    let cfg = TrainConfig {
        lr: 2e-3,
        batch_size: 8,
        epochs: 3,
        seed: 11,
        ..Default::default()
    };
    let run = root.join("run");
    train(&manifest, &model, &cfg, Some(&run)).unwrap();
    let params = load_checkpoint::<f32>(run.join(BEST_CHECKPOINT)).unwrap();
    let pre = PreprocessConfig {
        resolution: 16,
        ..Default::default()
    };
    let test = load_samples(&manifest, &pre, &[Split::Test]).unwrap();
    let attribution = AttributionConfig {
        smoothgrad_n: 4,
        ..Default::default()
    };
    let scored = score_samples(&params, &test, &attribution, &ScoreConfig::default(), 3).unwrap();
    write_score_dir(root.join("scores"), &scored, false).unwrap();
    let dump = read_score_dir(root.join("scores")).unwrap();
    let eval = EvalConfig {
        dice: DiceCvConfig { folds: 4, quantiles: 201 },
        ..Default::default()
    };
    let metrics = evaluate(&test, &dump, &eval).unwrap();
    (read_losses(run.join(LOSSES_CSV)).unwrap(), EvalReport::single(metrics))
}

#[test]
fn reproducibility() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (la, ra) = smoke_pipeline(a.path());
    let (lb, rb) = smoke_pipeline(b.path());
    let mut worst: f64 = 0.0;
    for (x, y) in la.iter().zip(&lb) {
        for (p, q) in [(&x.train, &y.train), (&x.val, &y.val)] {
            for (u, v) in [
                (p.l_kl, q.l_kl),
                (p.l_rec_vae, q.l_rec_vae),
                (p.l_rec_ce, q.l_rec_ce),
                (p.total, q.total),
            ] {
                worst = worst.max((u - v).abs());
            }
        }
    }
    let ok = la.len() == lb.len() && worst <= 1e-6 && ra == rb;
    report(
        "reproducibility",
        ok,
        format!(
            "{} epochs, max loss-curve deviation {worst:.1e}, reports identical: {}",
            la.len(),
            ra == rb
        ),
    );
    assert!(ok);
}
