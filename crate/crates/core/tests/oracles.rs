//! Independent reference computations for the probabilistic pieces.

use candle_core::{Device, Tensor};
use partlayout::baselines::{gmm_nll_tensor, sample_box_from_gmm, GMMBoxParams, GmmHeads};
use partlayout::boxvae::GaussianParams;
use partlayout::labelmapvae::mask_recon_loss;
use partlayout::training::kl_gaussian;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{Continuous, Normal};

fn t(v: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn random_mixture(rng: &mut ChaCha8Rng, k: usize) -> GMMBoxParams {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
    let s: f64 = raw.iter().sum();
    GMMBoxParams {
        weights: raw.iter().map(|w| w / s).collect(),
        means: (0..k).map(|_| std::array::from_fn(|_| rng.random_range(-0.8..0.8))).collect(),
        log_scales: (0..k).map(|_| std::array::from_fn(|_| rng.random_range(-3.0..0.0))).collect(),
    }
}

/// `-ln sum_k w_k prod_d N(x_d; mu_kd, sigma_kd)` straight from the densities.
fn mixture_oracle(g: &GMMBoxParams, x: [f64; 4]) -> f64 {
    let mut density = 0.0;
    for k in 0..g.weights.len() {
        let mut prod = g.weights[k];
        for d in 0..4 {
            prod *= Normal::new(g.means[k][d], g.log_scales[k][d].exp()).unwrap().pdf(x[d]);
        }
        density += prod;
    }
    -density.ln()
}

#[test]
fn gmm_nll_matches_density_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (b, p, k) = (3, 4, 3);
    let mut mixtures = Vec::new();
    let mut xs = Vec::new();
    for _ in 0..b * p {
        let g = random_mixture(&mut rng, k);
        let c = rng.random_range(0..k);
        xs.push(std::array::from_fn::<f64, 4, _>(|d| g.means[c][d] + rng.random_range(-0.2..0.2)));
        mixtures.push(g);
    }
    let heads = GmmHeads {
        weight_logits: t(mixtures.iter().flat_map(|g| g.weights.iter().map(|w| w.ln())).collect(), &[b, p, k]),
        means: t(mixtures.iter().flat_map(|g| g.means.iter().flatten().copied()).collect(), &[b, p, k, 4]),
        log_scales: t(mixtures.iter().flat_map(|g| g.log_scales.iter().flatten().copied()).collect(), &[b, p, k, 4]),
    };
    let x = t(xs.iter().flatten().copied().collect(), &[b, p, 4]);
    let got = gmm_nll_tensor(&heads, &x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    for (i, g) in mixtures.iter().enumerate() {
        let want = mixture_oracle(g, xs[i]);
        assert!((got[i] - want).abs() < 1e-6, "row {i}: {} vs {want}", got[i]);
        assert!((g.nll(xs[i]) - want).abs() < 1e-6);
        assert!((heads.params(i / p, i % p).unwrap().nll(xs[i]) - want).abs() < 1e-6);
    }
}

#[test]
fn sampled_components_follow_the_weights() {
    let g = GMMBoxParams {
        weights: vec![0.5, 0.3, 0.2],
        means: vec![[-0.6; 4], [0.0; 4], [0.6; 4]],
        log_scales: vec![[-5.0; 4]; 3],
    };
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut counts = [0usize; 3];
    for _ in 0..n {
        let x = sample_box_from_gmm(&g, &mut rng);
        assert!(x.iter().all(|v| (-1.0..=1.0).contains(v)));
        let nearest = (0..3)
            .min_by(|&a, &b| (x[0] - g.means[a][0]).abs().total_cmp(&(x[0] - g.means[b][0]).abs()))
            .unwrap();
        counts[nearest] += 1;
    }
    for (c, w) in counts.iter().zip(&g.weights) {
        let sigma = (n as f64 * w * (1.0 - w)).sqrt();
        assert!((*c as f64 - n as f64 * w).abs() < 3.0 * sigma, "{counts:?}");
    }
}

#[test]
fn mask_loss_matches_pixel_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (b, p, side) = (2, 3, 64);
    let cell = side * side;
    let logits: Vec<f64> = (0..b * p * 2 * cell).map(|_| rng.random_range(-3.0..3.0)).collect();
    let masks: Vec<f64> = (0..b * p * cell).map(|_| rng.random_bool(0.3) as u8 as f64).collect();
    let presence = vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0];
    let got = mask_recon_loss(
        &t(logits.clone(), &[b, p, 2, side, side]),
        &t(masks.clone(), &[b, p, side, side]),
        &t(presence.clone(), &[b, p]),
    )
    .unwrap()
    .to_vec1::<f64>()
    .unwrap();
    for i in 0..b {
        let mut total = 0.0;
        let mut present = 0.0;
        for k in 0..p {
            if presence[i * p + k] == 0.0 {
                continue;
            }
            present += 1.0;
            let mut ce = 0.0;
            for px in 0..cell {
                let bg = logits[((i * p + k) * 2) * cell + px];
                let fg = logits[((i * p + k) * 2 + 1) * cell + px];
                let lse = (bg.exp() + fg.exp()).ln();
                let y = masks[(i * p + k) * cell + px];
                ce -= y * (fg - lse) + (1.0 - y) * (bg - lse);
            }
            total += ce / cell as f64;
        }
        let want = if present > 0.0 { total / present } else { 0.0 };
        assert!((got[i] - want).abs() < 1e-6, "sample {i}: {} vs {want}", got[i]);
    }
}

#[test]
fn kl_matches_monte_carlo_estimate() {
    let mu = vec![0.5, -1.0, 0.2];
    let log_var = vec![-0.5, 0.3, 0.0];
    let g = GaussianParams {
        mu: t(mu.clone(), &[1, 3]),
        log_var: t(log_var.clone(), &[1, 3]),
    };
    let closed = kl_gaussian(&g).unwrap().to_vec1::<f64>().unwrap()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let draws = 1_000_000;
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..draws {
        let mut log_ratio = 0.0;
        for d in 0..3 {
            let sd = (log_var[d] / 2.0f64).exp();
            let e: f64 = StandardNormal.sample(&mut rng);
            let z = mu[d] + sd * e;
            log_ratio += -0.5 * e * e - sd.ln() + 0.5 * z * z;
        }
        sum += log_ratio;
        sq += log_ratio * log_ratio;
    }
    let mean = sum / draws as f64;
    let se = ((sq / draws as f64 - mean * mean) / draws as f64).sqrt();
    assert!((mean - closed).abs() < 4.0 * se, "closed {closed}, estimate {mean} +- {se}");
}
