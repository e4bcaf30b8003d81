use std::time::Instant;

use latentprobe::model::{gaussian_kl, ModelCheckpoint, ModelKind, TrainConfig};
use latentprobe_oracles::{finite_difference_check, monte_carlo_kl};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_case(seed: u64) -> (ModelCheckpoint, Vec<Vec<f64>>, Vec<Vec<f64>>, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=6);
    let m = rng.random_range(1..=4);
    let depth = rng.random_range(0..=2);
    let hidden = (0..depth).map(|_| rng.random_range(1..=5)).collect();
    let kind = if rng.random_bool(0.75) {
        ModelKind::Bvae
    } else {
        ModelKind::Ae
    };
    let config = TrainConfig {
        model_kind: kind,
        input_dim: n,
        latent_dim: m,
        hidden,
        beta: rng.random_range(0.0..2.0),
        seed,
        ..TrainConfig::default()
    };
    let mut model = ModelCheckpoint::initialize(config).unwrap();
    for decoder in [false, true] {
        let net = if decoder {
            model.decoder_mut()
        } else {
            model.encoder_mut()
        };
        for layer in net.layers_mut() {
            for p in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *p = rng.random_range(-1.0..1.0);
            }
        }
    }
    let rows = rng.random_range(1..=3);
    let mut gauss =
        |len: usize| -> Vec<f64> { (0..len).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let batch: Vec<Vec<f64>> = (0..rows).map(|_| gauss(n)).collect();
    let noise: Vec<Vec<f64>> = match kind {
        ModelKind::Ae => Vec::new(),
        ModelKind::Bvae => (0..rows).map(|_| gauss(m)).collect(),
    };
    let beta = model.config.effective_beta();
    (model, batch, noise, beta)
}

#[test]
fn analytic_gradients_match_central_differences() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut skipped = 0;
    let mut checked = 0;
    for seed in 0..100 {
        let (model, batch, noise, beta) = random_case(seed);
        let (_, grads) = model.loss_and_gradients(&batch, beta, &noise).unwrap();
        let analytic: Vec<f64> = grads
            .encoder
            .values()
            .chain(grads.decoder.values())
            .collect();
        let report = finite_difference_check(&model, &analytic, &batch, beta, &noise, 1e-5, 1e-5);
        assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
        worst = worst.max(report.max_rel_error);
        skipped += report.skipped;
        checked += report.checked;
    }
    assert!(
        checked > 20 * skipped,
        "too many kink skips: {skipped} of {}",
        checked + skipped
    );
    eprintln!("max relative error {worst:e}, {checked} checked, {skipped} skipped");
    assert!(start.elapsed().as_secs() < 30);
}

#[test]
fn closed_form_kl_matches_monte_carlo() {
    assert_eq!(gaussian_kl(0.0, 0.0), 0.0);
    for (mu, sigma) in [(0.0, 1.0), (1.0, 1.0), (0.0, 2.0), (2.0, 0.5)] {
        let exact = gaussian_kl(mu, 2.0 * f64::ln(sigma));
        let mc = monte_carlo_kl(mu, sigma, 1_000_000, 17);
        if exact == 0.0 {
            assert!(mc.abs() < 1e-12);
        } else {
            assert!(
                (mc - exact).abs() / exact < 0.01,
                "({mu}, {sigma}): {mc} vs {exact}"
            );
        }
    }
}

#[test]
fn loss_is_reconstruction_plus_beta_kl() {
    let (model, batch, noise, beta) = random_case(3);
    let loss = model.loss(&batch, beta, &noise).unwrap();
    assert!((loss.total - (loss.reconstruction + beta * loss.kl)).abs() < 1e-12);
    assert!(loss.kl >= 0.0);
}
