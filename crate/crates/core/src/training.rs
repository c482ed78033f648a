//! Unsupervised beta-VAE training: masked L2 reconstruction plus the analytic KL
//! divergence to a standard normal prior, weighted by `beta_norm = beta * M / N_in`.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Scalar, Tensor};
use crate::preprocess::{NetworkInput, NormConfig};
use crate::vae_model::{LatentStats, ModelConfig, Vae};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-5,
            batch_size: 2,
            epochs: 1000,
            beta: 12.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// `beta * M / N_in`, with `N_in` the number of entries of one input.
    pub fn beta_norm(&self, model: &ModelConfig) -> f64 {
        self.beta * model.latent_dim as f64 / model.input_len() as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || !(self.beta >= 0.0) {
            return Err(Error::Config(format!("invalid training config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub wall_clock_secs: f64,
}

impl TrainRecord {
    /// CSV with header `epoch,recon,kl,total`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,recon,kl,total\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{},{}\n", e.epoch, e.recon, e.kl, e.total));
        }
        s
    }
}

/// `|| mask(recon) - mask(target) ||_2`
pub fn recon_loss<T: Scalar>(recon: &[T], target: &[T], mask: &[bool]) -> f64 {
    assert_eq!(recon.len(), target.len());
    assert_eq!(recon.len(), mask.len());
    let mut sum = T::zero();
    for ((r, t), m) in recon.iter().zip(target).zip(mask) {
        if *m {
            let d = *r - *t;
            sum += d * d;
        }
    }
    sum.sqrt().as_f64()
}

/// KL divergence of `N(mu, sigma^2)` from `N(0, 1)`, summed over dimensions.
pub fn kl_loss(stats: &LatentStats) -> f64 {
    -0.5 * stats
        .mu
        .iter()
        .zip(&stats.logvar)
        .map(|(m, lv)| 1.0 + lv - m * m - lv.exp())
        .sum::<f64>()
}

/// A training example in the network element type with its per-entry mask.
#[derive(Debug, Clone)]
pub struct Sample<T> {
    pub values: Vec<T>,
    pub mask: Vec<bool>,
}

impl Sample<f32> {
    pub fn from_input(input: &NetworkInput) -> Self {
        Sample {
            values: input.values.clone(),
            mask: input.mask.expand_to_entries(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

pub fn stack_batch<T: Scalar>(samples: &[&Sample<T>], config: &ModelConfig) -> Tensor<T> {
    let mut data = Vec::with_capacity(samples.len() * config.input_len());
    for s in samples {
        assert_eq!(s.values.len(), config.input_len(), "sample length");
        data.extend_from_slice(&s.values);
    }
    Tensor::from_vec(
        &[samples.len(), config.in_channels, config.in_size, config.in_size],
        data,
    )
}

/// Mean over the batch of `recon_i + beta_norm * kl_i`, evaluated in training mode.
/// Gradients are accumulated into the model when `backprop` is set.
pub fn batch_objective<T: Scalar>(
    vae: &mut Vae<T>,
    samples: &[&Sample<T>],
    noise: Tensor<T>,
    beta_norm: f64,
    backprop: bool,
) -> Result<BatchLoss> {
    let x = stack_batch(samples, &vae.config);
    let pass = vae.forward_train(&x, noise)?;
    let n = samples.len();
    let m = vae.config.latent_dim;
    let len = vae.config.input_len();
    let inv_n = 1.0 / n as f64;

    let mut recon_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut d_recon = Tensor::zeros(&pass.recon.shape);
    let mut d_mu = Tensor::zeros(&pass.mu.shape);
    let mut d_lv = Tensor::zeros(&pass.logvar.shape);
    for (i, s) in samples.iter().enumerate() {
        let r = &pass.recon.data[i * len..(i + 1) * len];
        let l = recon_loss(r, &s.values, &s.mask);
        recon_sum += l;
        let stats = LatentStats {
            mu: pass.mu.data[i * m..(i + 1) * m].iter().map(|v| v.as_f64()).collect(),
            logvar: pass.logvar.data[i * m..(i + 1) * m].iter().map(|v| v.as_f64()).collect(),
        };
        kl_sum += kl_loss(&stats);
        if backprop {
            if l > 0.0 {
                let k = T::lit(inv_n / l);
                let dr = &mut d_recon.data[i * len..(i + 1) * len];
                for j in 0..len {
                    if s.mask[j] {
                        dr[j] = k * (r[j] - s.values[j]);
                    }
                }
            }
            let w = beta_norm * inv_n;
            for j in 0..m {
                d_mu.data[i * m + j] = T::lit(w * stats.mu[j]);
                d_lv.data[i * m + j] = T::lit(w * 0.5 * (stats.logvar[j].exp() - 1.0));
            }
        }
    }
    if backprop {
        vae.backward(&pass, &d_recon, d_mu, d_lv);
    }
    let recon = recon_sum * inv_n;
    let kl = kl_sum * inv_n;
    Ok(BatchLoss {
        recon,
        kl,
        total: recon + beta_norm * kl,
    })
}

pub fn standard_normal_tensor<T: Scalar>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n)
            .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
            .collect(),
    )
}

/// Deterministic inference-mode encoding of every input, in chunks.
pub fn encode_all(vae: &Vae<f32>, inputs: &[NetworkInput]) -> Result<Vec<LatentStats>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(4) {
        let samples: Vec<Sample<f32>> = chunk.iter().map(Sample::from_input).collect();
        let refs: Vec<&Sample<f32>> = samples.iter().collect();
        out.extend(vae.encode(&stack_batch(&refs, &vae.config))?);
    }
    Ok(out)
}

pub struct Trainer {
    pub vae: Vae<f32>,
    pub config: TrainConfig,
    optimizer: Adam<f32>,
    rng: ChaCha8Rng,
    samples: Vec<Sample<f32>>,
    epoch: usize,
}

impl Trainer {
    pub fn new(dataset: &[NetworkInput], config: TrainConfig, model: ModelConfig) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Precondition("training dataset is empty".into()));
        }
        config.validate()?;
        model.validate()?;
        let vae = Vae::new(model, config.seed)?;
        for d in dataset {
            if d.values.len() != vae.config.input_len() {
                return Err(Error::Config(format!(
                    "input {} has {} entries, model expects {}",
                    d.name,
                    d.values.len(),
                    vae.config.input_len()
                )));
            }
        }
        Ok(Trainer {
            vae,
            optimizer: Adam::new(AdamConfig::with_lr(config.learning_rate)),
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed)),
            samples: dataset.iter().map(Sample::from_input).collect(),
            config,
            epoch: 0,
        })
    }

    /// One pass over the shuffled dataset; returns sample-weighted mean losses.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        self.epoch += 1;
        let beta_norm = self.config.beta_norm(&self.vae.config);
        let m = self.vae.config.latent_dim;
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut recon, mut kl, mut total) = (0.0, 0.0, 0.0);
        for (b, idx) in order.chunks(self.config.batch_size).enumerate() {
            let batch: Vec<&Sample<f32>> = idx.iter().map(|&i| &self.samples[i]).collect();
            let noise = standard_normal_tensor(&[batch.len(), m], &mut self.rng);
            self.vae.zero_grad();
            let loss = batch_objective(&mut self.vae, &batch, noise, beta_norm, true)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite {
                    epoch: self.epoch,
                    batch: b,
                    detail: format!("recon {} kl {}", loss.recon, loss.kl),
                });
            }
            self.optimizer.step(&mut self.vae.params_mut());
            let w = batch.len() as f64;
            recon += loss.recon * w;
            kl += loss.kl * w;
            total += loss.total * w;
        }
        let n = self.samples.len() as f64;
        Ok(EpochRecord {
            epoch: self.epoch,
            recon: recon / n,
            kl: kl / n,
            total: total / n,
        })
    }
}

/// Trains for `config.epochs` epochs, calling `on_epoch` after each, then encodes every
/// material in inference mode to build the checkpoint's latent table.
pub fn train_with(
    dataset: &[NetworkInput],
    config: TrainConfig,
    model: ModelConfig,
    norm: NormConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Checkpoint, TrainRecord)> {
    let start = Instant::now();
    let seed = config.seed;
    let epochs = config.epochs;
    let mut trainer = Trainer::new(dataset, config, model)?;
    let mut records = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let r = trainer.run_epoch()?;
        on_epoch(&r);
        records.push(r);
    }
    let stats = encode_all(&trainer.vae, dataset)?;
    let latent_table: BTreeMap<String, LatentStats> = dataset
        .iter()
        .map(|d| d.name.clone())
        .zip(stats)
        .collect();
    let checkpoint = Checkpoint {
        model: trainer.vae,
        norm,
        slice_indices: dataset[0].slice_indices.clone(),
        latent_table,
    };
    Ok((
        checkpoint,
        TrainRecord {
            seed,
            epochs: records,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        },
    ))
}

pub fn train(
    dataset: &[NetworkInput],
    config: TrainConfig,
    model: ModelConfig,
    norm: NormConfig,
) -> Result<(Checkpoint, TrainRecord)> {
    train_with(dataset, config, model, norm, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    #[test]
    fn kl_closed_forms() {
        let prior = LatentStats {
            mu: vec![0.0; 8],
            logvar: vec![0.0; 8],
        };
        assert!(kl_loss(&prior).abs() < 1e-12);
        let mut shifted = prior.clone();
        shifted.mu[3] = 1.0;
        assert!((kl_loss(&shifted) - 0.5).abs() < 1e-12);
        let mut wide = prior.clone();
        wide.logvar[0] = 1.0;
        assert!((kl_loss(&wide) - (E - 2.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn recon_loss_examples() {
        let x = [1.0f64, 2.0, 3.0, 4.0];
        let mask = [true, false, true, true];
        assert_eq!(recon_loss(&x, &x, &mask), 0.0);
        let y = [2.0f64, 100.0, 5.0, 4.0];
        let base = recon_loss(&y, &x, &mask);
        assert!((base - 5.0f64.sqrt()).abs() < 1e-12);
        let y2 = [3.0f64, -7.0, 7.0, 4.0];
        assert!((recon_loss(&y2, &x, &mask) - 2.0 * base).abs() < 1e-12);
    }

    #[test]
    fn beta_norm_value() {
        let b = TrainConfig::default().beta_norm(&ModelConfig::default());
        assert!((b - 12.0 * 8.0 / 510300.0).abs() < 1e-18);
        assert!((b - 1.8813e-4).abs() < 1e-8);
    }
}
