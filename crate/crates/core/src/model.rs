//! AE and beta-VAE models over word vectors: encoding, decoding, the
//! reconstruction + beta * KL objective, and mini-batch Adam training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dims::{TraceRecord, TrainingTrace};
use crate::embed::EmbeddingTable;
use crate::nn::{AdamConfig, AdamState, DenseNet, Gradients, NnError};

pub const FORMAT_VERSION: u32 = 1;

/// Samples per parallel gradient chunk. Chunk sums are reduced in order, so
/// results do not depend on the thread count.
const GRAD_CHUNK: usize = 16;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Shape(#[from] NnError),
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("loss became non-finite in epoch {epoch}")]
    NonFiniteLoss {
        epoch: usize,
        last_finite: Box<ModelCheckpoint>,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    VersionUnsupported(u32),
    #[error("corrupt checkpoint header: {0}")]
    CorruptHeader(String),
    #[error("corrupt tensor data: {0}")]
    CorruptTensor(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ae,
    Bvae,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Ae => "ae",
            ModelKind::Bvae => "bvae",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ae" => Ok(ModelKind::Ae),
            "bvae" => Ok(ModelKind::Bvae),
            other => Err(format!(
                "unknown model kind {other:?} (expected ae or bvae)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model_kind: ModelKind,
    pub input_dim: usize,
    pub latent_dim: usize,
    /// Encoder hidden widths; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub learning_rate: f64,
    /// Start the log-variance head at exactly zero (sigma = 1).
    #[serde(default)]
    pub zero_init_variance_head: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model_kind: ModelKind::Bvae,
            input_dim: 300,
            latent_dim: 350,
            hidden: vec![400],
            beta: 1e-5,
            epochs: 100,
            batch_size: 128,
            seed: 0,
            learning_rate: 1e-3,
            zero_init_variance_head: false,
        }
    }
}

impl TrainConfig {
    /// beta as applied to the loss; always 0 for an AE.
    pub fn effective_beta(&self) -> f64 {
        match self.model_kind {
            ModelKind::Ae => 0.0,
            ModelKind::Bvae => self.beta,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::ConfigInvalid(msg.to_string()));
        if self.input_dim == 0 {
            return bad("input_dim must be at least 1");
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1");
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad("beta must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        Ok(())
    }

    fn encoder_widths(&self) -> Vec<usize> {
        let head = match self.model_kind {
            ModelKind::Ae => self.latent_dim,
            ModelKind::Bvae => 2 * self.latent_dim,
        };
        std::iter::once(self.input_dim)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(head))
            .collect()
    }

    fn decoder_widths(&self) -> Vec<usize> {
        std::iter::once(self.latent_dim)
            .chain(self.hidden.iter().rev().copied())
            .chain(std::iter::once(self.input_dim))
            .collect()
    }
}

/// Per-word latent Gaussian. An AE code has no variance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCode {
    pub mean: Vec<f64>,
    pub log_variance: Option<Vec<f64>>,
}

impl GaussianCode {
    pub fn sigma(&self) -> Option<Vec<f64>> {
        self.log_variance
            .as_ref()
            .map(|lv| lv.iter().map(|v| (0.5 * v).exp()).collect())
    }
}

/// Latent codes for a whole table, row-major `V x m`.
#[derive(Debug, Clone)]
pub struct LatentCodes {
    pub latent_dim: usize,
    pub means: Vec<f64>,
    pub log_variances: Option<Vec<f64>>,
}

impl LatentCodes {
    pub fn len(&self) -> usize {
        self.means.len() / self.latent_dim
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn mean(&self, row: usize) -> &[f64] {
        &self.means[row * self.latent_dim..(row + 1) * self.latent_dim]
    }

    pub fn mean_column(&self, dim: usize) -> Vec<f64> {
        self.means
            .iter()
            .skip(dim)
            .step_by(self.latent_dim)
            .copied()
            .collect()
    }

    pub fn sigma_column(&self, dim: usize) -> Option<Vec<f64>> {
        self.log_variances.as_ref().map(|lv| {
            lv.iter()
                .skip(dim)
                .step_by(self.latent_dim)
                .map(|v| (0.5 * v).exp())
                .collect()
        })
    }
}

/// Closed-form `KL(N(mu, exp(log_var)) || N(0, 1))` for one dimension.
pub fn gaussian_kl(mu: f64, log_var: f64) -> f64 {
    0.5 * (mu * mu + log_var.exp() - log_var - 1.0)
}

/// Loss over a batch: sums plus per-sample means.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub samples: usize,
}

impl LossBreakdown {
    pub fn mean_total(&self) -> f64 {
        self.total / self.samples.max(1) as f64
    }

    pub fn mean_reconstruction(&self) -> f64 {
        self.reconstruction / self.samples.max(1) as f64
    }

    pub fn mean_kl(&self) -> f64 {
        self.kl / self.samples.max(1) as f64
    }

    fn merge(&mut self, other: &LossBreakdown, beta: f64) {
        self.reconstruction += other.reconstruction;
        self.kl += other.kl;
        self.samples += other.samples;
        self.total = self.reconstruction + beta * self.kl;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients {
    pub encoder: Gradients,
    pub decoder: Gradients,
}

impl ModelGradients {
    fn zeros_like(model: &ModelCheckpoint) -> Self {
        Self {
            encoder: Gradients::zeros_like(&model.encoder),
            decoder: Gradients::zeros_like(&model.decoder),
        }
    }

    fn add_assign(&mut self, other: &ModelGradients) {
        self.encoder.add_assign(&other.encoder);
        self.decoder.add_assign(&other.decoder);
    }

    fn scale(&mut self, factor: f64) {
        self.encoder.scale(factor);
        self.decoder.scale(factor);
    }
}

/// A trained (or freshly initialised) AE / beta-VAE.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: TrainConfig,
    encoder: DenseNet,
    decoder: DenseNet,
    pub epoch: usize,
}

impl ModelCheckpoint {
    /// Seeded Glorot initialisation of both networks.
    pub fn initialize(config: TrainConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut encoder = DenseNet::mlp(&config.encoder_widths(), &mut rng)?;
        let decoder = DenseNet::mlp(&config.decoder_widths(), &mut rng)?;
        if config.model_kind == ModelKind::Bvae && config.zero_init_variance_head {
            let m = config.latent_dim;
            let head = encoder.layers_mut().last_mut().expect("non-empty network");
            let inputs = head.inputs;
            head.weights[m * inputs..].fill(0.0);
            head.bias[m..].fill(0.0);
        }
        Self::from_parts(config, encoder, decoder, 0)
    }

    /// Assembles a checkpoint from explicit networks, checking that the
    /// encoder emits `m` (AE) or `2m` (beta-VAE) values and the decoder maps
    /// `m -> n`.
    pub fn from_parts(
        config: TrainConfig,
        encoder: DenseNet,
        decoder: DenseNet,
        epoch: usize,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let m = config.latent_dim;
        let head = match config.model_kind {
            ModelKind::Ae => m,
            ModelKind::Bvae => 2 * m,
        };
        let checks = [
            ("encoder input", encoder.input_dim(), config.input_dim),
            ("encoder output", encoder.output_dim(), head),
            ("decoder input", decoder.input_dim(), m),
            ("decoder output", decoder.output_dim(), config.input_dim),
        ];
        for (what, found, expected) in checks {
            if found != expected {
                return Err(ModelError::ConfigInvalid(format!(
                    "{what} width is {found}, expected {expected}"
                )));
            }
        }
        Ok(Self {
            config,
            encoder,
            decoder,
            epoch,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.model_kind
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn encoder(&self) -> &DenseNet {
        &self.encoder
    }

    pub fn decoder(&self) -> &DenseNet {
        &self.decoder
    }

    pub fn encoder_mut(&mut self) -> &mut DenseNet {
        &mut self.encoder
    }

    pub fn decoder_mut(&mut self) -> &mut DenseNet {
        &mut self.decoder
    }

    pub fn encode(&self, x: &[f64]) -> Result<GaussianCode, ModelError> {
        let out = self.encoder.predict(x)?;
        Ok(self.split_head(out))
    }

    fn split_head(&self, mut out: Vec<f64>) -> GaussianCode {
        match self.config.model_kind {
            ModelKind::Ae => GaussianCode {
                mean: out,
                log_variance: None,
            },
            ModelKind::Bvae => {
                let log_variance = out.split_off(self.latent_dim());
                GaussianCode {
                    mean: out,
                    log_variance: Some(log_variance),
                }
            }
        }
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>, ModelError> {
        Ok(self.decoder.predict(z)?)
    }

    /// Encodes every row of `table` (in parallel, order preserved).
    pub fn encode_table(&self, table: &EmbeddingTable) -> Result<LatentCodes, ModelError> {
        if table.dim() != self.input_dim() {
            return Err(NnError::ShapeMismatch {
                expected: self.input_dim(),
                found: table.dim(),
            }
            .into());
        }
        let codes: Vec<GaussianCode> = (0..table.len())
            .into_par_iter()
            .map(|row| self.encode(table.row(row)))
            .collect::<Result<_, _>>()?;
        let m = self.latent_dim();
        let mut means = Vec::with_capacity(codes.len() * m);
        let mut log_variances = match self.kind() {
            ModelKind::Ae => None,
            ModelKind::Bvae => Some(Vec::with_capacity(codes.len() * m)),
        };
        for code in codes {
            means.extend_from_slice(&code.mean);
            if let (Some(all), Some(lv)) = (log_variances.as_mut(), code.log_variance.as_ref()) {
                all.extend_from_slice(lv);
            }
        }
        Ok(LatentCodes {
            latent_dim: m,
            means,
            log_variances,
        })
    }

    /// Reconstruction + beta * KL over `batch` with frozen noise draws
    /// (`noise[i]` has length `m`; ignored for an AE).
    pub fn loss<X: AsRef<[f64]>, E: AsRef<[f64]>>(
        &self,
        batch: &[X],
        beta: f64,
        noise: &[E],
    ) -> Result<LossBreakdown, ModelError> {
        self.check_batch(batch, noise)?;
        let mut total = LossBreakdown::default();
        for (i, x) in batch.iter().enumerate() {
            let eps = noise.get(i).map(|e| e.as_ref());
            let part = self.sample_pass(x.as_ref(), eps, beta, None)?;
            total.merge(&part, beta);
        }
        Ok(total)
    }

    /// Loss plus exact gradients of the summed loss with respect to all
    /// encoder and decoder parameters.
    pub fn loss_and_gradients<X: AsRef<[f64]>, E: AsRef<[f64]>>(
        &self,
        batch: &[X],
        beta: f64,
        noise: &[E],
    ) -> Result<(LossBreakdown, ModelGradients), ModelError> {
        self.check_batch(batch, noise)?;
        let mut grads = ModelGradients::zeros_like(self);
        let mut total = LossBreakdown::default();
        for (i, x) in batch.iter().enumerate() {
            let eps = noise.get(i).map(|e| e.as_ref());
            let part = self.sample_pass(x.as_ref(), eps, beta, Some(&mut grads))?;
            total.merge(&part, beta);
        }
        Ok((total, grads))
    }

    fn check_batch<X: AsRef<[f64]>, E: AsRef<[f64]>>(
        &self,
        batch: &[X],
        noise: &[E],
    ) -> Result<(), ModelError> {
        if self.kind() == ModelKind::Bvae {
            if noise.len() != batch.len() {
                return Err(NnError::ShapeMismatch {
                    expected: batch.len(),
                    found: noise.len(),
                }
                .into());
            }
            if let Some(bad) = noise.iter().find(|e| e.as_ref().len() != self.latent_dim()) {
                return Err(NnError::ShapeMismatch {
                    expected: self.latent_dim(),
                    found: bad.as_ref().len(),
                }
                .into());
            }
        }
        Ok(())
    }

    fn sample_pass(
        &self,
        x: &[f64],
        eps: Option<&[f64]>,
        beta: f64,
        grads: Option<&mut ModelGradients>,
    ) -> Result<LossBreakdown, ModelError> {
        let m = self.latent_dim();
        let (head, enc_tape) = self.encoder.forward(x)?;
        let (z, kl) = match self.kind() {
            ModelKind::Ae => (head[..m].to_vec(), 0.0),
            ModelKind::Bvae => {
                let eps = eps.ok_or(NnError::ShapeMismatch {
                    expected: m,
                    found: 0,
                })?;
                let (mu, lv) = head.split_at(m);
                let z = mu
                    .iter()
                    .zip(lv)
                    .zip(eps)
                    .map(|((mu, lv), e)| mu + (0.5 * lv).exp() * e)
                    .collect();
                let kl = mu
                    .iter()
                    .zip(lv)
                    .map(|(&mu, &lv)| gaussian_kl(mu, lv))
                    .sum();
                (z, kl)
            }
        };
        let (x_hat, dec_tape) = self.decoder.forward(&z)?;
        let reconstruction: f64 = x.iter().zip(&x_hat).map(|(a, b)| (a - b) * (a - b)).sum();
        let breakdown = LossBreakdown {
            total: reconstruction + beta * kl,
            reconstruction,
            kl,
            samples: 1,
        };

        if let Some(grads) = grads {
            let d_out: Vec<f64> = x_hat.iter().zip(x).map(|(h, t)| 2.0 * (h - t)).collect();
            let d_z = self
                .decoder
                .backward_accumulate(&dec_tape, &d_out, &mut grads.decoder)?;
            let d_head = match self.kind() {
                ModelKind::Ae => d_z,
                ModelKind::Bvae => {
                    let eps = eps.expect("checked above");
                    let (mu, lv) = head.split_at(m);
                    let mut d_head = vec![0.0; 2 * m];
                    for j in 0..m {
                        let var = lv[j].exp();
                        d_head[j] = d_z[j] + beta * mu[j];
                        d_head[m + j] =
                            d_z[j] * eps[j] * 0.5 * var.sqrt() + beta * 0.5 * (var - 1.0);
                    }
                    d_head
                }
            };
            self.encoder
                .backward_accumulate(&enc_tape, &d_head, &mut grads.encoder)?;
        }
        Ok(breakdown)
    }

    /// Mean per-word reconstruction error when decoding latent means, with
    /// the listed latent dimensions forced to zero.
    pub fn mean_reconstruction_error(
        &self,
        table: &EmbeddingTable,
        zeroed: &[usize],
    ) -> Result<f64, ModelError> {
        let errors: Vec<f64> = (0..table.len())
            .into_par_iter()
            .map(|row| {
                let x = table.row(row);
                let mut z = self.encode(x)?.mean;
                for &j in zeroed {
                    if let Some(v) = z.get_mut(j) {
                        *v = 0.0;
                    }
                }
                let x_hat = self.decode(&z)?;
                Ok(x.iter().zip(&x_hat).map(|(a, b)| (a - b) * (a - b)).sum())
            })
            .collect::<Result<_, ModelError>>()?;
        Ok(errors.iter().sum::<f64>() / table.len().max(1) as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.decoder.is_finite()
    }
}

/// Shuffled mini-batch Adam over all rows of `table`, starting from a
/// seeded initialisation.
///
/// `on_epoch` sees the checkpoint after every epoch and may fill in the
/// telemetry fields of the record before it is appended to the trace.
pub fn train<F>(
    table: &EmbeddingTable,
    config: TrainConfig,
    on_epoch: F,
) -> Result<(ModelCheckpoint, TrainingTrace), ModelError>
where
    F: FnMut(&ModelCheckpoint, &mut TraceRecord),
{
    config.validate()?;
    let model = ModelCheckpoint::initialize(config)?;
    train_from(model, table, on_epoch)
}

/// Like [`train`] but starts from `model` and runs `model.config.epochs`
/// further epochs. Epoch numbers continue from `model.epoch`.
pub fn train_from<F>(
    mut model: ModelCheckpoint,
    table: &EmbeddingTable,
    mut on_epoch: F,
) -> Result<(ModelCheckpoint, TrainingTrace), ModelError>
where
    F: FnMut(&ModelCheckpoint, &mut TraceRecord),
{
    let config = model.config.clone();
    config.validate()?;
    if table.dim() != config.input_dim {
        return Err(ModelError::ConfigInvalid(format!(
            "embeddings have {} dimensions but input_dim is {}",
            table.dim(),
            config.input_dim
        )));
    }
    let mut trace = TrainingTrace::default();
    let adam = AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut enc_opt = AdamState::new(&model.encoder, adam);
    let mut dec_opt = AdamState::new(&model.decoder, adam);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let beta = config.effective_beta();
    let m = config.latent_dim;
    let mut order: Vec<usize> = (0..table.len()).collect();

    let first = model.epoch + 1;
    for epoch in first..first + config.epochs {
        let last_finite = model.clone();
        order.shuffle(&mut rng);
        let mut epoch_loss = LossBreakdown::default();
        for batch in order.chunks(config.batch_size) {
            let noise: Vec<Vec<f64>> = match config.model_kind {
                ModelKind::Ae => Vec::new(),
                ModelKind::Bvae => batch
                    .iter()
                    .map(|_| (0..m).map(|_| StandardNormal.sample(&mut rng)).collect())
                    .collect(),
            };
            let parts: Vec<(LossBreakdown, ModelGradients)> = batch
                .par_chunks(GRAD_CHUNK)
                .enumerate()
                .map(|(c, rows)| {
                    let xs: Vec<&[f64]> = rows.iter().map(|&r| table.row(r)).collect();
                    let eps = if noise.is_empty() {
                        &noise[..]
                    } else {
                        &noise[c * GRAD_CHUNK..c * GRAD_CHUNK + rows.len()]
                    };
                    model.loss_and_gradients(&xs, beta, eps)
                })
                .collect::<Result<_, _>>()?;
            let mut grads = ModelGradients::zeros_like(&model);
            let mut batch_loss = LossBreakdown::default();
            for (loss, g) in &parts {
                batch_loss.merge(loss, beta);
                grads.add_assign(g);
            }
            if !batch_loss.total.is_finite() {
                return Err(ModelError::NonFiniteLoss {
                    epoch,
                    last_finite: Box::new(last_finite),
                });
            }
            grads.scale(1.0 / batch.len() as f64);
            enc_opt.step(&mut model.encoder, &grads.encoder)?;
            dec_opt.step(&mut model.decoder, &grads.decoder)?;
            epoch_loss.merge(&batch_loss, beta);
        }
        if !model.is_finite() {
            return Err(ModelError::NonFiniteLoss {
                epoch,
                last_finite: Box::new(last_finite),
            });
        }
        model.epoch = epoch;
        let mut record = TraceRecord {
            epoch,
            recon_loss: epoch_loss.mean_reconstruction(),
            kl_loss: (config.model_kind == ModelKind::Bvae).then(|| epoch_loss.mean_kl()),
            useful_dims: None,
            semeval: None,
            analogy: None,
        };
        on_epoch(&model, &mut record);
        trace.push(record);
    }
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, DenseLayer};

    fn tiny(kind: ModelKind) -> TrainConfig {
        TrainConfig {
            model_kind: kind,
            input_dim: 4,
            latent_dim: 3,
            hidden: vec![5],
            beta: 0.1,
            epochs: 0,
            batch_size: 8,
            seed: 7,
            learning_rate: 1e-3,
            zero_init_variance_head: false,
        }
    }

    #[test]
    fn shapes_round_trip() {
        let model = ModelCheckpoint::initialize(tiny(ModelKind::Bvae)).unwrap();
        let x = [0.5, -1.0, 2.0, 0.0];
        let code = model.encode(&x).unwrap();
        assert_eq!(code.mean.len(), 3);
        assert_eq!(code.log_variance.as_ref().unwrap().len(), 3);
        assert_eq!(model.decode(&code.mean).unwrap().len(), 4);
        assert_eq!(model.encode(&x).unwrap(), code);
        assert!(model.encode(&[0.0; 3]).is_err());
        assert!(model.decode(&[0.0; 4]).is_err());

        let ae = ModelCheckpoint::initialize(tiny(ModelKind::Ae)).unwrap();
        assert!(ae.encode(&x).unwrap().log_variance.is_none());
    }

    #[test]
    fn zero_final_layer_yields_bias_codes() {
        let config = TrainConfig {
            hidden: vec![],
            ..tiny(ModelKind::Ae)
        };
        let mut enc = DenseLayer::zeros(4, 3, Activation::Linear);
        enc.bias = vec![0.1, -0.2, 0.3];
        let mut dec = DenseLayer::zeros(3, 4, Activation::Linear);
        dec.bias = vec![1.0, 2.0, 3.0, 4.0];
        let model = ModelCheckpoint::from_parts(
            config,
            DenseNet::new(vec![enc], 0.01).unwrap(),
            DenseNet::new(vec![dec], 0.01).unwrap(),
            0,
        )
        .unwrap();
        assert_eq!(
            model.encode(&[9.0, 8.0, 7.0, 6.0]).unwrap().mean,
            vec![0.1, -0.2, 0.3]
        );
        assert_eq!(
            model.decode(&[5.0, -5.0, 1.0]).unwrap(),
            vec![1.0, 2.0, 3.0, 4.0]
        );
        assert_eq!(model.decode(&[0.0; 3]).unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn kl_closed_form_values() {
        assert_eq!(gaussian_kl(0.0, 0.0), 0.0);
        assert_eq!(gaussian_kl(1.0, 0.0), 0.5);
        for &(mu, lv) in &[(0.3, -1.0), (-2.0, 0.7), (0.0, 3.0)] {
            assert!(gaussian_kl(mu, lv) > 0.0);
        }
    }

    fn linear_identity_bvae(mu_bias: Vec<f64>, lv_bias: Vec<f64>) -> ModelCheckpoint {
        // encoder ignores x and emits fixed (mu, log_var); decoder is identity
        let config = TrainConfig {
            input_dim: 2,
            latent_dim: 2,
            hidden: vec![],
            ..tiny(ModelKind::Bvae)
        };
        let mut enc = DenseLayer::zeros(2, 4, Activation::Linear);
        enc.bias = mu_bias.into_iter().chain(lv_bias).collect();
        let mut dec = DenseLayer::zeros(2, 2, Activation::Linear);
        dec.weights = vec![1.0, 0.0, 0.0, 1.0];
        ModelCheckpoint::from_parts(
            config,
            DenseNet::new(vec![enc], 0.01).unwrap(),
            DenseNet::new(vec![dec], 0.01).unwrap(),
            0,
        )
        .unwrap()
    }

    #[test]
    fn loss_terms_on_constructed_models() {
        // unit Gaussians and a perfect reconstruction: everything vanishes
        let model = linear_identity_bvae(vec![0.0, 0.0], vec![0.0, 0.0]);
        let loss = model.loss(&[[0.0, 0.0]], 123.0, &[[0.0, 0.0]]).unwrap();
        assert_eq!(loss.kl, 0.0);
        assert_eq!(loss.total, 0.0);

        let model = linear_identity_bvae(vec![1.0, 0.0], vec![0.0, 0.0]);
        let loss = model.loss(&[[1.0, 0.0]], 2.0, &[[0.0, 0.0]]).unwrap();
        assert_eq!(loss.kl, 0.5);
        assert_eq!(loss.reconstruction, 0.0);
        assert_eq!(loss.total, 1.0);
        // noise enters through z = mu + sigma * eps
        let loss = model.loss(&[[1.0, 0.0]], 0.0, &[[0.0, 2.0]]).unwrap();
        assert_eq!(loss.reconstruction, 4.0);
    }

    #[test]
    fn noise_shape_is_checked() {
        let model = ModelCheckpoint::initialize(tiny(ModelKind::Bvae)).unwrap();
        let x = [[0.0; 4]];
        assert!(model.loss(&x, 1.0, &[[0.0; 2]]).is_err());
        assert!(model.loss::<_, [f64; 3]>(&x, 1.0, &[]).is_err());
    }

    #[test]
    fn zero_init_variance_head_gives_unit_sigma() {
        let config = TrainConfig {
            zero_init_variance_head: true,
            ..tiny(ModelKind::Bvae)
        };
        let model = ModelCheckpoint::initialize(config).unwrap();
        let code = model.encode(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(code.sigma().unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let table = EmbeddingTable::from_rows([
            ("a", vec![1.0, 0.0, 0.0, 0.0]),
            ("b", vec![0.0, 1.0, 0.0, 0.0]),
        ])
        .unwrap();
        let config = tiny(ModelKind::Bvae);
        let (model, trace) = train(&table, config.clone(), |_, _| {}).unwrap();
        assert_eq!(model, ModelCheckpoint::initialize(config).unwrap());
        assert!(trace.records().is_empty());
    }

    #[test]
    fn invalid_configs() {
        let table = EmbeddingTable::from_rows([("a", vec![1.0, 0.0])]).unwrap();
        assert!(matches!(
            train(&table, tiny(ModelKind::Ae), |_, _| {}),
            Err(ModelError::ConfigInvalid(_))
        ));
        let cfg = TrainConfig {
            latent_dim: 0,
            ..tiny(ModelKind::Ae)
        };
        assert!(matches!(
            ModelCheckpoint::initialize(cfg),
            Err(ModelError::ConfigInvalid(_))
        ));
        let cfg = TrainConfig {
            beta: -1.0,
            ..tiny(ModelKind::Bvae)
        };
        assert!(matches!(
            ModelCheckpoint::initialize(cfg),
            Err(ModelError::ConfigInvalid(_))
        ));
    }

    #[test]
    fn diverging_training_reports_last_finite_model() {
        let rows: Vec<(String, Vec<f64>)> = (0..16)
            .map(|i| {
                (
                    format!("w{i}"),
                    vec![1e200 * (i as f64 + 1.0), 0.0, 0.0, 0.0],
                )
            })
            .collect();
        let table = EmbeddingTable::from_rows(rows).unwrap();
        let config = TrainConfig {
            epochs: 3,
            ..tiny(ModelKind::Ae)
        };
        match train(&table, config, |_, _| {}) {
            Err(ModelError::NonFiniteLoss { epoch, last_finite }) => {
                assert_eq!(epoch, 1);
                assert!(last_finite.is_finite());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
