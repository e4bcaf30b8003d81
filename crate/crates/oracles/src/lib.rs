//! Slow, independent reference implementations. Nothing here reuses the
//! numerical code under test beyond plain data access.

use latentprobe::embed::EmbeddingTable;
use latentprobe::model::{ModelCheckpoint, ModelKind};
use latentprobe::nn::{Activation, DenseLayer};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Loss of one network pair written out directly from the layer
/// parameters. Also records the sign of every leaky pre-activation.
struct Forward<'a> {
    encoder: &'a [DenseLayer],
    decoder: &'a [DenseLayer],
    slope: f64,
    kind: ModelKind,
    m: usize,
}

fn run_net(layers: &[DenseLayer], slope: f64, x: &[f64], signs: &mut Vec<bool>) -> Vec<f64> {
    let mut h = x.to_vec();
    for layer in layers {
        let mut out = Vec::with_capacity(layer.outputs);
        for o in 0..layer.outputs {
            let mut acc = layer.bias[o];
            for i in 0..layer.inputs {
                acc += layer.weights[o * layer.inputs + i] * h[i];
            }
            out.push(acc);
        }
        if layer.activation == Activation::LeakyRelu {
            for v in &mut out {
                signs.push(*v > 0.0);
                if *v <= 0.0 {
                    *v *= slope;
                }
            }
        }
        h = out;
    }
    h
}

impl Forward<'_> {
    fn loss(
        &self,
        batch: &[Vec<f64>],
        beta: f64,
        noise: &[Vec<f64>],
        signs: &mut Vec<bool>,
    ) -> f64 {
        signs.clear();
        let mut total = 0.0;
        for (i, x) in batch.iter().enumerate() {
            let head = run_net(self.encoder, self.slope, x, signs);
            let z: Vec<f64> = match self.kind {
                ModelKind::Ae => head.clone(),
                ModelKind::Bvae => (0..self.m)
                    .map(|j| head[j] + (head[self.m + j] / 2.0).exp() * noise[i][j])
                    .collect(),
            };
            if self.kind == ModelKind::Bvae {
                for j in 0..self.m {
                    let (mu, lv) = (head[j], head[self.m + j]);
                    total += beta * 0.5 * (mu * mu + lv.exp() - lv - 1.0);
                }
            }
            let x_hat = run_net(self.decoder, self.slope, &z, signs);
            total += x
                .iter()
                .zip(&x_hat)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>();
        }
        total
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameters skipped because the probe step crossed a leaky-ReLU kink.
    pub skipped: usize,
}

/// Compares `analytic` (encoder parameters then decoder parameters, each
/// layer weights then bias) with central differences of the summed loss.
/// Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn finite_difference_check(
    model: &ModelCheckpoint,
    analytic: &[f64],
    batch: &[Vec<f64>],
    beta: f64,
    noise: &[Vec<f64>],
    h: f64,
    floor: f64,
) -> GradCheck {
    let mut encoder = model.encoder().layers().to_vec();
    let mut decoder = model.decoder().layers().to_vec();
    let slope = model.encoder().leaky_slope();
    let (kind, m) = (model.kind(), model.latent_dim());

    let mut base_signs = Vec::new();
    Forward {
        encoder: &encoder,
        decoder: &decoder,
        slope,
        kind,
        m,
    }
    .loss(batch, beta, noise, &mut base_signs);

    let mut addresses = Vec::new();
    for (net, layers) in [(0usize, &encoder), (1, &decoder)] {
        for (l, layer) in layers.iter().enumerate() {
            addresses.extend((0..layer.weights.len()).map(|i| (net, l, false, i)));
            addresses.extend((0..layer.bias.len()).map(|i| (net, l, true, i)));
        }
    }
    assert_eq!(
        addresses.len(),
        analytic.len(),
        "analytic gradient has the wrong length"
    );

    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut signs = Vec::new();
    for (&(net, l, is_bias, i), &a) in addresses.iter().zip(analytic) {
        let slot = |enc: &mut Vec<DenseLayer>, dec: &mut Vec<DenseLayer>, delta: f64| {
            let layer = if net == 0 { &mut enc[l] } else { &mut dec[l] };
            let p = if is_bias {
                &mut layer.bias[i]
            } else {
                &mut layer.weights[i]
            };
            *p += delta;
        };
        let mut eval = |delta: f64, enc: &mut Vec<DenseLayer>, dec: &mut Vec<DenseLayer>| {
            slot(enc, dec, delta);
            let loss = Forward {
                encoder: enc,
                decoder: dec,
                slope,
                kind,
                m,
            }
            .loss(batch, beta, noise, &mut signs);
            slot(enc, dec, -delta);
            (loss, signs == base_signs)
        };
        let (plus, same_plus) = eval(h, &mut encoder, &mut decoder);
        let (minus, same_minus) = eval(-h, &mut encoder, &mut decoder);
        if !(same_plus && same_minus) {
            report.skipped += 1;
            continue;
        }
        let n = (plus - minus) / (2.0 * h);
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    report
}

/// `KL(N(mu, sigma^2) || N(0, 1))` as the sample mean of
/// `log q(z) - log p(z)` over `samples` draws from `q`.
pub fn monte_carlo_kl(mu: f64, sigma: f64, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    for _ in 0..samples {
        let e: f64 = StandardNormal.sample(&mut rng);
        let z = mu + sigma * e;
        let log_q = -sigma.ln() - 0.5 * e * e;
        let log_p = -0.5 * z * z;
        sum += log_q - log_p;
    }
    sum / samples as f64
}

/// Top eigenpair of the sample covariance (divisor `n - 1`) via a dense
/// symmetric eigendecomposition.
pub fn dense_top_eigenpair(points: &[Vec<f64>]) -> (Vec<f64>, f64) {
    let (rows, cols) = (points.len(), points[0].len());
    let data = DMatrix::from_fn(rows, cols, |r, c| points[r][c]);
    let mean = data.row_mean();
    let centered = DMatrix::from_fn(rows, cols, |r, c| data[(r, c)] - mean[c]);
    let cov = centered.transpose() * &centered / (rows as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let best = eig.eigenvalues.imax();
    (
        eig.eigenvectors.column(best).iter().copied().collect(),
        eig.eigenvalues[best],
    )
}

/// Spearman correlation with midranks found by pairwise comparison.
pub fn naive_spearman(a: &[f64], b: &[f64]) -> f64 {
    let ranks = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|&x| {
                let below = v.iter().filter(|&&y| y < x).count() as f64;
                let equal = v.iter().filter(|&&y| y == x).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    cov / (va * vb).sqrt()
}

/// Rows and cosine distances of the `k` nearest rows by full sort.
pub fn brute_force_knn(
    table: &EmbeddingTable,
    query: &[f64],
    k: usize,
    exclude: &[usize],
) -> Vec<(usize, f64)> {
    let qn = query.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut all: Vec<(usize, f64)> = (0..table.len())
        .filter(|r| !exclude.contains(r))
        .map(|r| {
            let row = table.row(r);
            let rn = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            let d = if rn == 0.0 {
                1.0
            } else {
                1.0 - row.iter().zip(query).map(|(a, b)| a * b).sum::<f64>() / (qn * rn)
            };
            (r, d)
        })
        .collect();
    all.sort_by(|x, y| x.1.partial_cmp(&y.1).unwrap().then(x.0.cmp(&y.0)));
    all.truncate(k);
    all
}

/// Explained variance of `P` evenly spaced values on `[a, b]` pushed
/// through a linear map whose relevant column has squared norm `col_sq`.
pub fn linear_sweep_variance(col_sq: f64, a: f64, b: f64, p: usize) -> f64 {
    let p = p as f64;
    let step = (b - a) / (p - 1.0);
    col_sq * step * step * p * (p + 1.0) / 12.0
}

/// Central-difference check of `d(upstream . net(input)) / d(params)` for a
/// bare network; `analytic` is ordered layer by layer, weights then bias.
pub fn net_finite_difference_check(
    net: &latentprobe::nn::DenseNet,
    input: &[f64],
    upstream: &[f64],
    analytic: &[f64],
    h: f64,
    floor: f64,
) -> GradCheck {
    let slope = net.leaky_slope();
    let mut layers = net.layers().to_vec();
    let objective = |layers: &[DenseLayer], signs: &mut Vec<bool>| -> f64 {
        signs.clear();
        let out = run_net(layers, slope, input, signs);
        out.iter().zip(upstream).map(|(a, b)| a * b).sum()
    };
    let mut base_signs = Vec::new();
    objective(&layers, &mut base_signs);
    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut signs = Vec::new();
    let mut k = 0;
    for l in 0..layers.len() {
        let (nw, nb) = (layers[l].weights.len(), layers[l].bias.len());
        for idx in 0..nw + nb {
            let shift = |layers: &mut Vec<DenseLayer>, delta: f64| {
                if idx < nw {
                    layers[l].weights[idx] += delta;
                } else {
                    layers[l].bias[idx - nw] += delta;
                }
            };
            shift(&mut layers, h);
            let plus = objective(&layers, &mut signs);
            let same_plus = signs == base_signs;
            shift(&mut layers, -2.0 * h);
            let minus = objective(&layers, &mut signs);
            let same_minus = signs == base_signs;
            shift(&mut layers, h);
            let a = analytic[k];
            k += 1;
            if !(same_plus && same_minus) {
                report.skipped += 1;
                continue;
            }
            let n = (plus - minus) / (2.0 * h);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    assert_eq!(k, analytic.len(), "analytic gradient has the wrong length");
    report
}
