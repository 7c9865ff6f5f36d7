//! Variational autoencoder: a 5-layer ReLU encoder producing `(mu, logvar)`,
//! a mirrored 5-layer decoder with linear output, the β-weighted loss
//! `MSE + β·KL`, and the mini-batch Adam training loop.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::PreprocessorState;
use crate::numcore::{
    clamp_logvar, clamp_logvar_backward, gaussian_kl, mse_loss, relu, relu_backward,
    reparameterize_backward, reparameterize_with_noise, Adam, Linear, LrSchedule, Matrix,
    RngStream,
};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_HIDDEN_DIMS: [usize; 4] = [512, 384, 256, 128];

// RngStream sub-stream ids
const INIT_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;
const SHUFFLE_STREAM_BASE: u64 = 1_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    /// Encoded feature width; 0 means "take it from the training data".
    pub input_dim: usize,
    pub latent_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub beta: f64,
    pub epochs: usize,
    pub base_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub lr_step_size: usize,
    pub lr_gamma: f64,
    /// Train on label-0 rows only instead of the whole training set.
    pub normals_only: bool,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            input_dim: 0,
            latent_dim: 20,
            hidden_dims: DEFAULT_HIDDEN_DIMS.to_vec(),
            beta: 0.25,
            epochs: 30,
            base_lr: 1e-3,
            batch_size: 128,
            seed: 0,
            lr_step_size: 10,
            lr_gamma: 0.1,
            normals_only: false,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.input_dim == 0 {
            return fail("input_dim must be >= 1".into());
        }
        if self.latent_dim == 0 {
            return fail("latent_dim must be >= 1".into());
        }
        if self.hidden_dims.len() != 4 || self.hidden_dims.contains(&0) {
            return fail(format!(
                "hidden_dims must hold exactly four positive widths, got {:?}",
                self.hidden_dims
            ));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return fail(format!("beta must be finite and >= 0, got {}", self.beta));
        }
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<LrSchedule> {
        LrSchedule::new(self.base_lr, self.lr_step_size, self.lr_gamma)
    }

    /// Total number of trainable scalars for this configuration.
    pub fn param_count(&self) -> usize {
        let enc = self.encoder_widths();
        let dec = self.decoder_widths();
        [enc, dec]
            .iter()
            .flat_map(|w| w.windows(2).map(|p| p[0] * p[1] + p[1]))
            .sum()
    }

    fn encoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden_dims);
        w.push(2 * self.latent_dim);
        w
    }

    fn decoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.latent_dim];
        w.extend(self.hidden_dims.iter().rev());
        w.push(self.input_dim);
        w
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
struct Mlp {
    layers: Vec<Linear>,
    preacts: Vec<Matrix>,
}

impl Mlp {
    fn new(widths: &[usize], rng: &mut RngStream) -> Self {
        Mlp {
            layers: widths
                .windows(2)
                .map(|w| Linear::new(w[0], w[1], rng))
                .collect(),
            preacts: Vec::new(),
        }
    }

    fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = self.layers[0].apply(x)?;
        for layer in &self.layers[1..] {
            h = layer.apply(&relu(&h))?;
        }
        Ok(h)
    }

    fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        self.preacts.clear();
        let last = self.layers.len() - 1;
        let mut h = self.layers[0].forward(x)?;
        for i in 1..=last {
            let act = relu(&h);
            self.preacts.push(h);
            h = self.layers[i].forward(&act)?;
        }
        Ok(h)
    }

    fn backward(&mut self, upstream: &Matrix) -> Result<Matrix> {
        let last = self.layers.len() - 1;
        let mut g = self.layers[last].backward(upstream)?;
        for i in (0..last).rev() {
            let pre = self.preacts.get(i).ok_or(Error::State(
                "Mlp::backward called without a preceding forward",
            ))?;
            g = relu_backward(pre, &g)?;
            g = self.layers[i].backward(&g)?;
        }
        self.preacts.clear();
        Ok(g)
    }
}

/// Loss components for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub re: f64,
    pub kl: f64,
}

/// `total = re + beta · kl` with `re` the feature-and-batch mean squared error
/// and `kl` the batch-mean Gaussian KL.
pub fn loss(
    x: &Matrix,
    x_hat: &Matrix,
    mu: &Matrix,
    logvar: &Matrix,
    beta: f64,
) -> Result<LossParts> {
    let (re, _) = mse_loss(x, x_hat)?;
    let kl = gaussian_kl(mu, logvar)?.value;
    Ok(LossParts {
        total: re + beta * kl,
        re,
        kl,
    })
}

#[derive(Debug, Clone)]
pub struct Vae {
    config: VaeConfig,
    encoder: Mlp,
    decoder: Mlp,
}

impl Vae {
    /// Fresh model with seeded Glorot-uniform weights.
    pub fn build(config: &VaeConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::derive(config.seed, INIT_STREAM);
        let encoder = Mlp::new(&config.encoder_widths(), &mut rng);
        let decoder = Mlp::new(&config.decoder_widths(), &mut rng);
        Ok(Vae {
            config: config.clone(),
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(Linear::param_count).sum()
    }

    /// Encoder layers then decoder layers.
    pub fn layers(&self) -> impl Iterator<Item = &Linear> {
        self.encoder.layers.iter().chain(&self.decoder.layers)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        self.encoder
            .layers
            .iter_mut()
            .chain(self.decoder.layers.iter_mut())
    }

    pub fn encoder_layers(&self) -> &[Linear] {
        &self.encoder.layers
    }

    pub fn encoder_layers_mut(&mut self) -> &mut [Linear] {
        &mut self.encoder.layers
    }

    pub fn decoder_layers_mut(&mut self) -> &mut [Linear] {
        &mut self.decoder.layers
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::Dimension {
                context: "VAE input width",
                expected: self.input_dim(),
                actual: x.cols(),
            });
        }
        Ok(())
    }

    /// Posterior parameters `(mu, logvar)`; logvar clamped to [-20, 20].
    pub fn encode(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        self.check_input(x)?;
        let head = self.encoder.apply(x)?;
        let (mu, raw_logvar) = head.split_cols(self.latent_dim());
        Ok((mu, clamp_logvar(&raw_logvar)))
    }

    pub fn decode(&self, z: &Matrix) -> Result<Matrix> {
        if z.cols() != self.latent_dim() {
            return Err(Error::Dimension {
                context: "VAE latent width",
                expected: self.latent_dim(),
                actual: z.cols(),
            });
        }
        self.decoder.apply(z)
    }

    /// Deterministic embedding: the posterior mean.
    pub fn latent_embed(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.encode(x)?.0)
    }

    /// `decode(latent_embed(x))`.
    pub fn reconstruct(&self, x: &Matrix) -> Result<Matrix> {
        self.decode(&self.latent_embed(x)?)
    }

    pub fn zero_grad(&mut self) {
        self.layers_mut().for_each(Linear::zero_grad);
    }

    /// Forward + backward on one batch with the given reparameterization noise.
    /// Gradients are accumulated into the layers (call [`Vae::zero_grad`] first).
    pub fn loss_and_gradients(&mut self, x: &Matrix, eps: Matrix, beta: f64) -> Result<LossParts> {
        self.check_input(x)?;
        let latent = self.latent_dim();
        let head = self.encoder.forward(x)?;
        let (mu, raw_logvar) = head.split_cols(latent);
        let logvar = clamp_logvar(&raw_logvar);
        let sample = reparameterize_with_noise(&mu, &logvar, eps)?;
        let x_hat = self.decoder.forward(&sample.z)?;

        let (re, grad_xhat) = mse_loss(x, &x_hat)?;
        let kl = gaussian_kl(&mu, &logvar)?;
        let parts = LossParts {
            total: re + beta * kl.value,
            re,
            kl: kl.value,
        };

        let grad_z = self.decoder.backward(&grad_xhat)?;
        let (g_mu_re, g_lv_re) = reparameterize_backward(&grad_z, &logvar, &sample.eps)?;
        let g_mu = g_mu_re.zip_map(&kl.grad_mu, |a, b| a + beta * b)?;
        let g_lv = g_lv_re.zip_map(&kl.grad_logvar, |a, b| a + beta * b)?;
        let g_raw_lv = clamp_logvar_backward(&raw_logvar, &g_lv)?;
        self.encoder.backward(&g_mu.hstack(&g_raw_lv)?)?;
        Ok(parts)
    }

    fn param_slots(&mut self) -> Vec<(&mut [f64], &[f64])> {
        self.layers_mut()
            .flat_map(|l| l.params_and_grads())
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let record = |l: &Linear| LayerRecord {
            in_dim: l.in_dim(),
            out_dim: l.out_dim(),
            weight: l.weight().as_slice().to_vec(),
            bias: l.bias().to_vec(),
        };
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.config.clone(),
            encoder: self.encoder.layers.iter().map(record).collect(),
            decoder: self.decoder.layers.iter().map(record).collect(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Compatibility(format!(
                "checkpoint format version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                ckpt.format_version
            )));
        }
        ckpt.config.validate()?;
        let restore = |records: Vec<LayerRecord>, widths: Vec<usize>| -> Result<Mlp> {
            if records.len() != widths.len() - 1 {
                return Err(Error::Compatibility(format!(
                    "expected {} layers, checkpoint has {}",
                    widths.len() - 1,
                    records.len()
                )));
            }
            let mut layers = Vec::with_capacity(records.len());
            for (r, w) in records.into_iter().zip(widths.windows(2)) {
                if r.in_dim != w[0] || r.out_dim != w[1] {
                    return Err(Error::Compatibility(format!(
                        "layer shape {}x{} does not match config {}x{}",
                        r.in_dim, r.out_dim, w[0], w[1]
                    )));
                }
                let weight = Matrix::from_vec(r.out_dim, r.in_dim, r.weight)?;
                layers.push(Linear::from_parts(weight, r.bias)?);
            }
            Ok(Mlp {
                layers,
                preacts: Vec::new(),
            })
        };
        let encoder = restore(ckpt.encoder, ckpt.config.encoder_widths())?;
        let decoder = restore(ckpt.decoder, ckpt.config.decoder_widths())?;
        Ok(Vae {
            config: ckpt.config,
            encoder,
            decoder,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(BufWriter::new(file), &self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
        Vae::from_checkpoint(ckpt)
    }

    /// Loads a checkpoint and checks it against the preprocessor that will
    /// feed it.
    pub fn load_for(path: &Path, preprocessor: &PreprocessorState) -> Result<Self> {
        let vae = Vae::load(path)?;
        if vae.input_dim() != preprocessor.output_dim() {
            return Err(Error::Compatibility(format!(
                "checkpoint input_dim {} but preprocessor produces {} columns",
                vae.input_dim(),
                preprocessor.output_dim()
            )));
        }
        Ok(vae)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim x in_dim`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Serialized model: configuration plus every layer's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: VaeConfig,
    pub encoder: Vec<LayerRecord>,
    pub decoder: Vec<LayerRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub total: f64,
    pub re: f64,
    pub kl: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn final_epoch(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }
}

/// Trains a fresh model on the rows of `x` (labels are never consulted).
///
/// `config.input_dim` may be 0, in which case it is taken from `x`.
pub fn train(x: &Matrix, config: &VaeConfig) -> Result<(Vae, TrainReport)> {
    if x.rows() == 0 {
        return Err(Error::Empty("train needs at least one row"));
    }
    let mut config = config.clone();
    if config.input_dim == 0 {
        config.input_dim = x.cols();
    }
    let mut vae = Vae::build(&config)?;
    vae.check_input(x)?;
    x.check_finite("training data")?;

    let schedule = config.schedule()?;
    let mut adam = Adam::default();
    let mut noise = RngStream::derive(config.seed, NOISE_STREAM);
    let mut order: Vec<usize> = (0..x.rows()).collect();
    let mut report = TrainReport::default();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = schedule.lr_at(epoch);
        let mut shuffle = RngStream::derive(config.seed, SHUFFLE_STREAM_BASE + epoch as u64);
        order.sort_unstable();
        shuffle.shuffle(&mut order);

        let (mut sum_total, mut sum_re, mut sum_kl) = (0.0, 0.0, 0.0);
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = x.select_rows(chunk);
            let eps = noise.normal_matrix(chunk.len(), config.latent_dim);
            vae.zero_grad();
            let parts = vae.loss_and_gradients(&batch, eps, config.beta)?;
            if !parts.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    loss: parts.total,
                });
            }
            adam.step(vae.param_slots(), lr)?;
            let w = chunk.len() as f64;
            sum_total += parts.total * w;
            sum_re += parts.re * w;
            sum_kl += parts.kl * w;
        }
        let n = x.rows() as f64;
        report.epochs.push(EpochStats {
            epoch,
            total: sum_total / n,
            re: sum_re / n,
            kl: sum_kl / n,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok((vae, report))
}
