//! Generative replay with a label-conditioned VAE.
//!
//! Encoder: image plus a constant label plane → stride-2 convs with ReLU →
//! flatten → linear heads for `μ` and `log σ²`. Decoder: `z` concatenated
//! with a learned 2-d label embedding → linear (no activation) → unflatten →
//! stride-2 transposed convs with ReLU, sigmoid on the last. Every stage
//! halves (or doubles) the spatial side, so the image side must be divisible
//! by `2^stages`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::activations::{relu_backward, relu_forward};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, ConvTranspose2d, Linear};
use crate::loss::bce_with_logits;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct CvaeConfig {
    pub channels: usize,
    pub side: usize,
    /// Encoder channel widths, one per stride-2 stage.
    pub widths: Vec<usize>,
    pub latent: usize,
    pub step_size: f64,
    pub momentum: f64,
}

impl CvaeConfig {
    /// Widths 32/64/128 and latent 128.
    pub fn standard(channels: usize, side: usize) -> Self {
        CvaeConfig {
            channels,
            side,
            widths: vec![32, 64, 128],
            latent: 128,
            step_size: 0.01,
            momentum: 0.9,
        }
    }

    fn bottom_side(&self) -> Result<usize> {
        let div = 1usize << self.widths.len();
        if self.widths.is_empty() || self.side % div != 0 || self.side < div {
            return Err(Error::Config(format!(
                "cvae: image side {} is not divisible by 2^{}",
                self.side,
                self.widths.len()
            )));
        }
        Ok(self.side / div)
    }
}

pub const LABEL_EMBED: usize = 2;

#[derive(Debug, Clone)]
pub struct Cvae {
    pub config: CvaeConfig,
    encoder: Vec<Conv2d>,
    fc_mu: Linear,
    fc_logvar: Linear,
    /// Rows are labels 0 and 1.
    embed: Tensor,
    grad_embed: Tensor,
    dec_fc: Linear,
    decoder: Vec<ConvTranspose2d>,
    velocity: Vec<Vec<f64>>,
    steps: u64,
}

/// One ELBO evaluation with its pieces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboParts {
    pub recon: f64,
    pub kl: f64,
    /// Hash of the ReLU sign pattern, for finite-difference checks.
    pub signature: u64,
}

impl ElboParts {
    pub fn total(&self) -> f64 {
        self.recon + self.kl
    }
}

/// `KL(N(μ, σ²) ‖ N(0, 1))` summed over latent dims, averaged over the batch.
pub fn kl_divergence(mu: &[f64], logvar: &[f64], batch: usize) -> f64 {
    let s: f64 = mu
        .iter()
        .zip(logvar)
        .map(|(&m, &lv)| 1.0 + lv - m * m - lv.exp())
        .sum();
    -0.5 * s / batch.max(1) as f64
}

fn with_label_plane(x: &Tensor, labels: &[usize]) -> Tensor {
    let (b, c, h, w) = x.dims4("cvae input").expect("4-d image batch");
    let hw = h * w;
    let mut data = Vec::with_capacity(b * (c + 1) * hw);
    for (n, &label) in labels.iter().enumerate() {
        data.extend_from_slice(&x.data()[n * c * hw..(n + 1) * c * hw]);
        data.extend(std::iter::repeat_n(label as f64, hw));
    }
    Tensor::from_vec(&[b, c + 1, h, w], data).expect("label plane shape")
}

fn sign_hash(h: &mut u64, t: &Tensor) {
    for &v in t.data() {
        *h = h.rotate_left(1) ^ u64::from(v > 0.0);
        *h = h.wrapping_mul(0x100_0000_01B3);
    }
}

impl Cvae {
    pub fn new(config: CvaeConfig, rng: &mut impl Rng) -> Result<Self> {
        let bottom = config.bottom_side()?;
        let mut encoder = Vec::new();
        let mut cin = config.channels + 1;
        for &w in &config.widths {
            encoder.push(Conv2d::with_geometry(cin, w, 4, 2, 1, rng));
            cin = w;
        }
        let flat = cin * bottom * bottom;
        let fc_mu = Linear::new(flat, config.latent, rng);
        let fc_logvar = Linear::new(flat, config.latent, rng);
        let mut embed = Tensor::zeros(&[2, LABEL_EMBED]);
        for v in embed.data_mut() {
            *v = StandardNormal.sample(rng);
        }
        let dec_fc = Linear::new(config.latent + LABEL_EMBED, flat, rng);
        let mut decoder = Vec::new();
        let mut widths: Vec<usize> = config.widths.iter().rev().copied().collect();
        widths.push(config.channels);
        for pair in widths.windows(2) {
            decoder.push(ConvTranspose2d::new(pair[0], pair[1], 4, 2, 1, rng));
        }
        let mut cvae = Cvae {
            config,
            encoder,
            fc_mu,
            fc_logvar,
            grad_embed: Tensor::zeros(&[2, LABEL_EMBED]),
            embed,
            dec_fc,
            decoder,
            velocity: Vec::new(),
            steps: 0,
        };
        cvae.velocity = cvae.params_mut().iter().map(|(p, _)| vec![0.0; p.len()]).collect();
        Ok(cvae)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Every parameter tensor with its gradient, in a fixed order.
    fn params_mut(&mut self) -> Vec<(&mut [f64], &[f64])> {
        let mut out: Vec<(&mut [f64], &[f64])> = Vec::new();
        for c in &mut self.encoder {
            out.push((c.weight.data_mut(), c.grad_weight.data()));
            out.push((c.bias.data_mut(), c.grad_bias.data()));
        }
        for l in [&mut self.fc_mu, &mut self.fc_logvar, &mut self.dec_fc] {
            out.push((l.weight.data_mut(), l.grad_weight.data()));
            out.push((l.bias.data_mut(), l.grad_bias.data()));
        }
        out.push((self.embed.data_mut(), self.grad_embed.data()));
        for c in &mut self.decoder {
            out.push((c.weight.data_mut(), c.grad_weight.data()));
            out.push((c.bias.data_mut(), c.grad_bias.data()));
        }
        out
    }

    /// Flat copies of all parameters and gradients (same order as the optimizer).
    pub fn snapshot(&mut self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        self.params_mut().into_iter().map(|(p, g)| (p.to_vec(), g.to_vec())).unzip()
    }

    /// Overwrite one parameter entry; returns the old value.
    pub fn set_param(&mut self, tensor: usize, idx: usize, value: f64) -> f64 {
        let mut params = self.params_mut();
        std::mem::replace(&mut params[tensor].0[idx], value)
    }

    fn bottom_shape(&self, b: usize) -> [usize; 4] {
        let s = self.config.bottom_side().expect("validated");
        [b, *self.config.widths.last().expect("nonempty"), s, s]
    }

    /// Decoder logits for latent codes and labels.
    fn decode_logits(&self, z: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let zc = self.concat_embedding(z, labels);
        let mut h = self.dec_fc.forward(&zc)?.reshape(&self.bottom_shape(labels.len()))?;
        for (i, d) in self.decoder.iter().enumerate() {
            h = d.forward(&h)?;
            if i + 1 < self.decoder.len() {
                h = relu_forward(&h);
            }
        }
        Ok(h)
    }

    fn concat_embedding(&self, z: &Tensor, labels: &[usize]) -> Tensor {
        let l = self.config.latent;
        let mut data = Vec::with_capacity(labels.len() * (l + LABEL_EMBED));
        for (n, &label) in labels.iter().enumerate() {
            data.extend_from_slice(&z.data()[n * l..(n + 1) * l]);
            data.extend_from_slice(&self.embed.data()[label * LABEL_EMBED..(label + 1) * LABEL_EMBED]);
        }
        Tensor::from_vec(&[labels.len(), l + LABEL_EMBED], data).expect("latent shape")
    }

    fn check_batch(&self, x: &Tensor, labels: &[usize]) -> Result<()> {
        let (b, c, h, w) = x.dims4("cvae batch")?;
        if c != self.config.channels || h != self.config.side || w != self.config.side {
            return Err(Error::Dimension(format!(
                "cvae expects [B, {}, {}, {}], got {:?}",
                self.config.channels,
                self.config.side,
                self.config.side,
                x.shape()
            )));
        }
        if labels.len() != b || labels.iter().any(|&l| l > 1) {
            return Err(Error::Validation("cvae labels must be one of {0, 1} per image".into()));
        }
        Ok(())
    }

    /// Forward and backward for fixed reparameterization noise `eps`
    /// (`[B, latent]`). Leaves gradients in place; does not update.
    pub fn elbo_gradients(&mut self, x: &Tensor, labels: &[usize], eps: &Tensor) -> Result<ElboParts> {
        self.check_batch(x, labels)?;
        let b = labels.len();
        let lat = self.config.latent;
        let mut signature = 0u64;

        let mut h = with_label_plane(x, labels);
        let mut enc_pre = Vec::new();
        for conv in &mut self.encoder {
            let pre = conv.forward_train(&h)?;
            sign_hash(&mut signature, &pre);
            h = relu_forward(&pre);
            enc_pre.push(pre);
        }
        let bottom = h.shape().to_vec();
        let flat_len: usize = bottom[1..].iter().product();
        let flat = h.reshape(&[b, flat_len])?;
        let mu = self.fc_mu.forward_train(&flat)?;
        let logvar = self.fc_logvar.forward_train(&flat)?;
        let sigma: Vec<f64> = logvar.data().iter().map(|&lv| (0.5 * lv).exp()).collect();
        let z_data: Vec<f64> = mu
            .data()
            .iter()
            .zip(&sigma)
            .zip(eps.data())
            .map(|((&m, &s), &e)| m + s * e)
            .collect();
        let z = Tensor::from_vec(&[b, lat], z_data)?;
        let zc = self.concat_embedding(&z, labels);
        let mut d = self.dec_fc.forward_train(&zc)?.reshape(&self.bottom_shape(b))?;
        let mut dec_pre = Vec::new();
        let n_dec = self.decoder.len();
        for (i, dconv) in self.decoder.iter_mut().enumerate() {
            let pre = dconv.forward_train(&d)?;
            if i + 1 < n_dec {
                sign_hash(&mut signature, &pre);
                d = relu_forward(&pre);
                dec_pre.push(pre);
            } else {
                d = pre;
            }
        }
        let (recon, g_logits) = bce_with_logits(&d, x)?;
        let kl = kl_divergence(mu.data(), logvar.data(), b);

        // decoder backward
        let mut g = g_logits;
        for i in (0..n_dec).rev() {
            if i + 1 < n_dec {
                g = relu_backward(&g, &dec_pre[i])?;
            }
            g = self.decoder[i].backward(&g)?;
        }
        let g = g.reshape(&[b, self.dec_fc.out_features])?;
        let g_zc = self.dec_fc.backward(&g)?;
        self.grad_embed.fill(0.0);
        let width = lat + LABEL_EMBED;
        let mut g_mu = vec![0.0; b * lat];
        let mut g_lv = vec![0.0; b * lat];
        let inv_b = 1.0 / b as f64;
        for (n, &label) in labels.iter().enumerate() {
            let row = &g_zc.data()[n * width..(n + 1) * width];
            for j in 0..LABEL_EMBED {
                self.grad_embed.data_mut()[label * LABEL_EMBED + j] += row[lat + j];
            }
            for j in 0..lat {
                let k = n * lat + j;
                let gz = row[j];
                let lv = logvar.data()[k];
                g_mu[k] = gz + mu.data()[k] * inv_b;
                g_lv[k] = gz * eps.data()[k] * 0.5 * sigma[k] + 0.5 * (lv.exp() - 1.0) * inv_b;
            }
        }
        let g_flat_mu = self.fc_mu.backward(&Tensor::from_vec(&[b, lat], g_mu)?)?;
        let g_flat_lv = self.fc_logvar.backward(&Tensor::from_vec(&[b, lat], g_lv)?)?;
        let sum: Vec<f64> = g_flat_mu.data().iter().zip(g_flat_lv.data()).map(|(a, c)| a + c).collect();
        let mut g = Tensor::from_vec(&bottom, sum)?;
        for i in (0..self.encoder.len()).rev() {
            g = relu_backward(&g, &enc_pre[i])?;
            g = self.encoder[i].backward(&g)?;
        }
        Ok(ElboParts { recon, kl, signature })
    }

    /// Loss only, for a fixed `eps`; pure.
    pub fn elbo(&self, x: &Tensor, labels: &[usize], eps: &Tensor) -> Result<ElboParts> {
        self.check_batch(x, labels)?;
        let b = labels.len();
        let mut signature = 0u64;
        let mut h = with_label_plane(x, labels);
        for conv in &self.encoder {
            let pre = conv.forward(&h)?;
            sign_hash(&mut signature, &pre);
            h = relu_forward(&pre);
        }
        let flat_len: usize = h.shape()[1..].iter().product();
        let flat = h.reshape(&[b, flat_len])?;
        let mu = self.fc_mu.forward(&flat)?;
        let logvar = self.fc_logvar.forward(&flat)?;
        let z: Vec<f64> = mu
            .data()
            .iter()
            .zip(logvar.data())
            .zip(eps.data())
            .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
            .collect();
        let zc = self.concat_embedding(&Tensor::from_vec(&[b, self.config.latent], z)?, labels);
        let mut d = self.dec_fc.forward(&zc)?.reshape(&self.bottom_shape(b))?;
        let n_dec = self.decoder.len();
        for (i, dconv) in self.decoder.iter().enumerate() {
            d = dconv.forward(&d)?;
            if i + 1 < n_dec {
                sign_hash(&mut signature, &d);
                d = relu_forward(&d);
            }
        }
        let (recon, _) = bce_with_logits(&d, x)?;
        Ok(ElboParts {
            recon,
            kl: kl_divergence(mu.data(), logvar.data(), b),
            signature,
        })
    }

    /// One SGD-momentum step on the ELBO. A non-finite loss or gradient
    /// aborts before any parameter changes.
    pub fn train_step(&mut self, x: &Tensor, labels: &[usize], rng: &mut impl Rng) -> Result<ElboParts> {
        let n = labels.len() * self.config.latent;
        let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let eps = Tensor::from_vec(&[labels.len(), self.config.latent], eps)?;
        let parts = self.elbo_gradients(x, labels, &eps)?;
        if !parts.total().is_finite() {
            return Err(Error::NumericalFault(format!(
                "cvae loss is not finite (recon {}, kl {}) at step {}",
                parts.recon, parts.kl, self.steps
            )));
        }
        let (lr, mom) = (self.config.step_size, self.config.momentum);
        let mut velocity = std::mem::take(&mut self.velocity);
        {
            let params = self.params_mut();
            if params.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
                self.velocity = velocity;
                return Err(Error::NumericalFault("cvae gradient is not finite".into()));
            }
            for ((p, g), v) in params.into_iter().zip(velocity.iter_mut()) {
                for ((pi, &gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                    *vi = mom * *vi + gi;
                    *pi -= lr * *vi;
                }
            }
        }
        self.velocity = velocity;
        self.steps += 1;
        Ok(parts)
    }

    /// Decode `n` samples from the prior with uniform random labels.
    pub fn generate(&self, n: usize, rng: &mut impl Rng) -> Result<(Tensor, Vec<usize>)> {
        if self.steps == 0 {
            return Err(Error::State("cvae sampled before any training step".into()));
        }
        let (c, s) = (self.config.channels, self.config.side);
        if n == 0 {
            return Ok((Tensor::zeros(&[0, c, s, s]), Vec::new()));
        }
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let z: Vec<f64> = (0..n * self.config.latent).map(|_| StandardNormal.sample(rng)).collect();
        let z = Tensor::from_vec(&[n, self.config.latent], z)?;
        let logits = self.decode_logits(&z, &labels)?;
        Ok((logits.map(|l| 1.0 / (1.0 + (-l).exp())), labels))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplayConfig {
    pub fraction: f64,
    pub step_size: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            fraction: 1.0 / 6.0,
            step_size: 0.01,
        }
    }
}

impl ReplayConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.fraction) {
            return Err(Error::Config(format!("replay.fraction must lie in [0, 1), got {}", self.fraction)));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("replay.step_size must be positive, got {}", self.step_size)));
        }
        Ok(())
    }
}

/// Generated samples for a batch of `batch` images: nearest integer, ties up.
pub fn replay_count(batch: usize, fraction: f64) -> usize {
    ((batch as f64 * fraction + 0.5).floor() as usize).min(batch)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplayStats {
    pub steps: u64,
    pub generated: u64,
    pub min_kl: f64,
    pub last_recon: f64,
    pub last_kl: f64,
}

#[derive(Debug, Clone)]
pub struct Replay {
    pub config: ReplayConfig,
    pub cvae: Cvae,
    stats: ReplayStats,
}

impl Replay {
    pub fn new(config: ReplayConfig, channels: usize, side: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut cvae_cfg = CvaeConfig::standard(channels, side);
        cvae_cfg.step_size = config.step_size;
        Ok(Replay {
            config,
            cvae: Cvae::new(cvae_cfg, rng)?,
            stats: ReplayStats {
                steps: 0,
                generated: 0,
                min_kl: f64::INFINITY,
                last_recon: f64::NAN,
                last_kl: f64::NAN,
            },
        })
    }

    pub fn stats(&self) -> ReplayStats {
        self.stats
    }

    /// Replace the tail of a real batch with generated samples once history
    /// exists. Returns the batch and how many samples were generated.
    pub fn mix_batch(
        &mut self,
        x: Tensor,
        labels: Vec<usize>,
        has_history: bool,
        rng: &mut impl Rng,
    ) -> Result<(Tensor, Vec<usize>, usize)> {
        let b = labels.len();
        let n_gen = if has_history { replay_count(b, self.config.fraction) } else { 0 };
        if n_gen == 0 {
            return Ok((x, labels, 0));
        }
        let (gen_x, gen_y) = self.cvae.generate(n_gen, rng)?;
        let real = x.slice_outer(0, b - n_gen);
        let mixed = Tensor::concat_outer(&[&real, &gen_x])?;
        let mut y = labels;
        y.truncate(b - n_gen);
        y.extend(gen_y);
        self.stats.generated += n_gen as u64;
        Ok((mixed, y, n_gen))
    }

    /// One CVAE update on the (mixed) training batch.
    pub fn train(&mut self, x: &Tensor, labels: &[usize], rng: &mut impl Rng) -> Result<ElboParts> {
        let parts = self.cvae.train_step(x, labels, rng)?;
        if parts.kl < 0.0 {
            return Err(Error::NumericalFault(format!("negative KL {}", parts.kl)));
        }
        self.stats.steps += 1;
        self.stats.min_kl = self.stats.min_kl.min(parts.kl);
        self.stats.last_recon = parts.recon;
        self.stats.last_kl = parts.kl;
        Ok(parts)
    }
}
