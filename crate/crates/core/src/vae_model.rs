//! The convolutional beta-VAE: a probabilistic encoder producing `(mu, log sigma^2)`,
//! reparameterized sampling and a decoder back to the sliced BRDF layout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    conv_out, conv_transpose_out, BatchNorm2d, Conv2d, ConvTranspose2d, Layer, LeakyRelu, Linear,
    Param, ResidualBlock, Scalar, Sequential, Tensor,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub in_channels: usize,
    /// Input planes are `in_size x in_size`.
    pub in_size: usize,
    /// Output channels of the three strided encoder convolutions. The last entry is
    /// the bottleneck width that the decoder reshapes to.
    pub encoder_channels: Vec<usize>,
    /// Hidden widths of the encoder's fully connected chain (before the `2M` head).
    pub encoder_fc: Vec<usize>,
    /// Hidden widths of the decoder's fully connected chain (after the `M` input).
    pub decoder_fc: Vec<usize>,
    pub residual_blocks_encoder: usize,
    pub residual_blocks_decoder: usize,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 8,
            in_channels: 63,
            in_size: 90,
            encoder_channels: vec![64, 64, 64],
            encoder_fc: vec![512, 128],
            decoder_fc: vec![128, 512],
            residual_blocks_encoder: 9,
            residual_blocks_decoder: 3,
            leaky_slope: 0.2,
        }
    }
}

pub const STRIDE: usize = 2;
pub const PAD: usize = 1;
pub const ENCODER_KERNEL: usize = 3;

impl ModelConfig {
    /// Spatial size after each strided encoder convolution, starting with the input.
    pub fn encoder_spatial_chain(&self) -> Vec<usize> {
        let mut chain = vec![self.in_size];
        for _ in &self.encoder_channels {
            let n = *chain.last().unwrap();
            chain.push(conv_out(n, ENCODER_KERNEL, STRIDE, PAD));
        }
        chain
    }

    /// Kernel of each decoder transposed convolution so that `(n - 1) 2 - 2 + k`
    /// retraces the encoder chain exactly.
    pub fn decoder_kernels(&self) -> Vec<usize> {
        let chain = self.encoder_spatial_chain();
        (0..self.encoder_channels.len())
            .rev()
            .map(|i| chain[i] + 2 * PAD + STRIDE - STRIDE * chain[i + 1])
            .collect()
    }

    pub fn decoder_spatial_chain(&self) -> Vec<usize> {
        let chain = self.encoder_spatial_chain();
        let mut out = vec![*chain.last().unwrap()];
        for k in self.decoder_kernels() {
            let n = *out.last().unwrap();
            out.push(conv_transpose_out(n, k, STRIDE, PAD));
        }
        out
    }

    pub fn bottleneck(&self) -> (usize, usize) {
        (
            *self.encoder_channels.last().unwrap(),
            *self.encoder_spatial_chain().last().unwrap(),
        )
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.in_size * self.in_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be at least 1".into()));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::Config("encoder_channels must be nonempty and positive".into()));
        }
        if self.in_channels == 0 || self.in_size < 2 {
            return Err(Error::Config("input shape too small".into()));
        }
        let chain = self.encoder_spatial_chain();
        for k in self.decoder_kernels() {
            if !(2..=8).contains(&k) {
                return Err(Error::Config(format!(
                    "encoder chain {chain:?} has no matching transposed-conv kernel (got {k})"
                )));
            }
        }
        let dec = self.decoder_spatial_chain();
        if *dec.last().unwrap() != self.in_size {
            return Err(Error::Config(format!(
                "decoder chain {dec:?} does not reach input size {}",
                self.in_size
            )));
        }
        Ok(())
    }
}

/// Encoder output for one input: mean and log-variance, both of length `M`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl LatentStats {
    pub fn sigma(&self) -> Vec<f64> {
        self.logvar.iter().map(|lv| (0.5 * lv).exp()).collect()
    }

    pub fn mean_code(&self) -> LatentCode {
        LatentCode(self.mu.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentCode(pub Vec<f64>);

impl LatentCode {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// `z = mu + exp(logvar / 2) * noise`
pub fn reparameterize(stats: &LatentStats, noise: &[f64]) -> LatentCode {
    assert_eq!(stats.mu.len(), noise.len(), "noise length must match latent dim");
    LatentCode(
        stats
            .mu
            .iter()
            .zip(&stats.logvar)
            .zip(noise)
            .map(|((m, lv), e)| {
                let sigma = (0.5 * lv).exp();
                if sigma == 0.0 {
                    *m
                } else {
                    m + sigma * e
                }
            })
            .collect(),
    )
}

/// Activations of one training-mode pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct TrainPass<T> {
    pub mu: Tensor<T>,
    pub logvar: Tensor<T>,
    pub noise: Tensor<T>,
    pub recon: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Vae<T> {
    pub config: ModelConfig,
    pub encoder: Sequential<T>,
    pub decoder: Sequential<T>,
}

impl<T: Scalar> Vae<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slope = config.leaky_slope;
        let (bottleneck_ch, bottleneck_size) = config.bottleneck();
        let flat = bottleneck_ch * bottleneck_size * bottleneck_size;

        let mut enc = Vec::new();
        let mut ch = config.in_channels;
        for (i, &out) in config.encoder_channels.iter().enumerate() {
            enc.push(Layer::Conv(Conv2d::new(
                &format!("encoder.conv{i}"),
                ch,
                out,
                ENCODER_KERNEL,
                STRIDE,
                PAD,
                &mut rng,
            )));
            enc.push(Layer::BatchNorm(BatchNorm2d::new(&format!("encoder.bn{i}"), out)));
            enc.push(Layer::LeakyRelu(LeakyRelu::new(slope)));
            ch = out;
        }
        for i in 0..config.residual_blocks_encoder {
            enc.push(Layer::Residual(ResidualBlock::new(
                &format!("encoder.res{i}"),
                ch,
                slope,
                &mut rng,
            )));
        }
        enc.push(Layer::Flatten);
        let mut width = flat;
        for (i, &h) in config.encoder_fc.iter().enumerate() {
            enc.push(Layer::Linear(Linear::new(&format!("encoder.fc{i}"), width, h, &mut rng)));
            enc.push(Layer::LeakyRelu(LeakyRelu::new(slope)));
            width = h;
        }
        enc.push(Layer::Linear(Linear::new(
            &format!("encoder.fc{}", config.encoder_fc.len()),
            width,
            2 * config.latent_dim,
            &mut rng,
        )));

        let mut dec = Vec::new();
        let mut width = config.latent_dim;
        for (i, &h) in config.decoder_fc.iter().chain(std::iter::once(&flat)).enumerate() {
            dec.push(Layer::Linear(Linear::new(&format!("decoder.fc{i}"), width, h, &mut rng)));
            dec.push(Layer::LeakyRelu(LeakyRelu::new(slope)));
            width = h;
        }
        dec.push(Layer::Unflatten([bottleneck_ch, bottleneck_size, bottleneck_size]));
        for i in 0..config.residual_blocks_decoder {
            dec.push(Layer::Residual(ResidualBlock::new(
                &format!("decoder.res{i}"),
                bottleneck_ch,
                slope,
                &mut rng,
            )));
        }
        let kernels = config.decoder_kernels();
        let n = kernels.len();
        let mut ch = bottleneck_ch;
        for (i, &k) in kernels.iter().enumerate() {
            let last = i + 1 == n;
            let out = if last {
                config.in_channels
            } else {
                config.encoder_channels[n - 2 - i]
            };
            dec.push(Layer::ConvTranspose(ConvTranspose2d::new(
                &format!("decoder.deconv{i}"),
                ch,
                out,
                k,
                STRIDE,
                PAD,
                &mut rng,
            )));
            if !last {
                dec.push(Layer::BatchNorm(BatchNorm2d::new(&format!("decoder.bn{i}"), out)));
                dec.push(Layer::LeakyRelu(LeakyRelu::new(slope)));
            }
            ch = out;
        }

        Ok(Vae {
            config,
            encoder: Sequential::new(enc),
            decoder: Sequential::new(dec),
        })
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let c = &self.config;
        if x.shape.len() != 4 || x.shape[1..] != [c.in_channels, c.in_size, c.in_size] {
            return Err(Error::Config(format!(
                "input shape {:?} does not match [N, {}, {}, {}]",
                x.shape, c.in_channels, c.in_size, c.in_size
            )));
        }
        Ok(())
    }

    fn split_head(&self, head: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let m = self.config.latent_dim;
        let n = head.batch();
        let mut mu = Tensor::zeros(&[n, m]);
        let mut lv = Tensor::zeros(&[n, m]);
        for i in 0..n {
            mu.data[i * m..(i + 1) * m].copy_from_slice(&head.data[i * 2 * m..i * 2 * m + m]);
            lv.data[i * m..(i + 1) * m].copy_from_slice(&head.data[i * 2 * m + m..(i + 1) * 2 * m]);
        }
        (mu, lv)
    }

    /// Deterministic inference-mode encoding of a batch.
    pub fn encode(&self, x: &Tensor<T>) -> Result<Vec<LatentStats>> {
        self.check_input(x)?;
        let (mu, lv) = self.split_head(&self.encoder.infer(x));
        let m = self.config.latent_dim;
        Ok((0..x.batch())
            .map(|i| LatentStats {
                mu: mu.data[i * m..(i + 1) * m].iter().map(|v| v.as_f64()).collect(),
                logvar: lv.data[i * m..(i + 1) * m].iter().map(|v| v.as_f64()).collect(),
            })
            .collect())
    }

    /// Deterministic inference-mode decoding of a batch of codes.
    pub fn decode(&self, codes: &[LatentCode]) -> Result<Tensor<T>> {
        let m = self.config.latent_dim;
        let mut data = Vec::with_capacity(codes.len() * m);
        for z in codes {
            if z.dim() != m {
                return Err(Error::Config(format!(
                    "latent code has length {}, expected {m}",
                    z.dim()
                )));
            }
            data.extend(z.0.iter().map(|v| T::lit(*v)));
        }
        Ok(self.decoder.infer(&Tensor::from_vec(&[codes.len(), m], data)))
    }

    /// Training-mode pass (batch statistics, cached activations).
    pub fn forward_train(&mut self, x: &Tensor<T>, noise: Tensor<T>) -> Result<TrainPass<T>> {
        self.check_input(x)?;
        let head = self.encoder.forward(x);
        let (mu, logvar) = self.split_head(&head);
        assert_eq!(noise.shape, mu.shape, "noise shape");
        let mut z = mu.clone();
        for i in 0..z.len() {
            z.data[i] += (T::lit(0.5) * logvar.data[i]).exp() * noise.data[i];
        }
        let recon = self.decoder.forward(&z);
        Ok(TrainPass {
            mu,
            logvar,
            noise,
            recon,
        })
    }

    /// Backpropagates gradients of the loss w.r.t. the reconstruction, `mu` and
    /// `logvar` (the latter two excluding the sampling path, which is added here).
    pub fn backward(
        &mut self,
        pass: &TrainPass<T>,
        d_recon: &Tensor<T>,
        mut d_mu: Tensor<T>,
        mut d_logvar: Tensor<T>,
    ) {
        let dz = self.decoder.backward(d_recon, true).expect("latent gradient");
        let half = T::lit(0.5);
        for i in 0..dz.len() {
            d_mu.data[i] += dz.data[i];
            let sigma = (half * pass.logvar.data[i]).exp();
            d_logvar.data[i] += dz.data[i] * pass.noise.data[i] * half * sigma;
        }
        let m = self.config.latent_dim;
        let n = d_mu.batch();
        let mut d_head = Tensor::zeros(&[n, 2 * m]);
        for i in 0..n {
            d_head.data[i * 2 * m..i * 2 * m + m].copy_from_slice(&d_mu.data[i * m..(i + 1) * m]);
            d_head.data[i * 2 * m + m..(i + 1) * 2 * m]
                .copy_from_slice(&d_logvar.data[i * m..(i + 1) * m]);
        }
        self.encoder.backward(&d_head, false);
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.encoder.params_mut();
        v.extend(self.decoder.params_mut());
        v
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.encoder.params();
        v.extend(self.decoder.params());
        v
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Converts every weight and buffer to another element type.
    pub fn cast<U: Scalar>(&self) -> Vae<U> {
        let mut out = Vae::<U>::new(self.config.clone(), 0).expect("config already validated");
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            debug_assert_eq!(dst.name, src.name);
            for (d, s) in dst.value.iter_mut().zip(&src.value) {
                *d = U::lit(s.as_f64());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            latent_dim: 2,
            in_channels: 3,
            in_size: 12,
            encoder_channels: vec![4, 4, 4],
            encoder_fc: vec![8, 6],
            decoder_fc: vec![6, 8],
            residual_blocks_encoder: 1,
            residual_blocks_decoder: 1,
            leaky_slope: 0.2,
        }
    }

    #[test]
    fn default_chains() {
        let c = ModelConfig::default();
        assert_eq!(c.encoder_spatial_chain(), vec![90, 45, 23, 12]);
        assert_eq!(c.decoder_kernels(), vec![3, 3, 4]);
        assert_eq!(c.decoder_spatial_chain(), vec![12, 23, 45, 90]);
        assert_eq!(c.bottleneck(), (64, 12));
        c.validate().unwrap();
    }

    #[test]
    fn tiny_chain_round_trips() {
        let c = tiny();
        assert_eq!(c.encoder_spatial_chain(), vec![12, 6, 3, 2]);
        assert_eq!(*c.decoder_spatial_chain().last().unwrap(), 12);
    }

    #[test]
    fn zero_latent_dim_rejected() {
        let c = ModelConfig {
            latent_dim: 0,
            ..tiny()
        };
        assert!(matches!(Vae::<f32>::new(c, 0), Err(Error::Config(_))));
    }

    #[test]
    fn reparameterize_examples() {
        let s = LatentStats {
            mu: vec![1.0; 8],
            logvar: vec![0.0; 8],
        };
        assert_eq!(reparameterize(&s, &[0.0; 8]).0, vec![1.0; 8]);
        assert_eq!(reparameterize(&s, &[2.0; 8]).0, vec![3.0; 8]);
        let collapsed = LatentStats {
            mu: vec![0.5; 8],
            logvar: vec![f64::NEG_INFINITY; 8],
        };
        assert_eq!(reparameterize(&collapsed, &[1.7; 8]).0, vec![0.5; 8]);
    }

    #[test]
    fn encode_decode_shapes_and_determinism() {
        let vae = Vae::<f64>::new(tiny(), 5).unwrap();
        let x = Tensor::from_vec(&[2, 3, 12, 12], (0..864).map(|i| (i as f64 * 0.01).sin()).collect());
        let a = vae.encode(&x).unwrap();
        let b = vae.encode(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].mu.len(), 2);
        let z = vec![a[0].mean_code(), a[1].mean_code()];
        let y1 = vae.decode(&z).unwrap();
        let y2 = vae.decode(&z).unwrap();
        assert_eq!(y1, y2);
        assert_eq!(y1.shape, vec![2, 3, 12, 12]);
        let bad = Tensor::<f64>::zeros(&[1, 3, 10, 10]);
        assert!(matches!(vae.encode(&bad), Err(Error::Config(_))));
        assert!(vae.decode(&[LatentCode(vec![0.0; 3])]).is_err());
    }

    #[test]
    fn zero_weights_give_constant_decode() {
        let mut vae = Vae::<f64>::new(tiny(), 1).unwrap();
        for p in vae.decoder.params_mut() {
            if p.trainable {
                p.value.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let a = vae.decode(&[LatentCode(vec![3.0, -2.0])]).unwrap();
        let b = vae.decode(&[LatentCode(vec![-1.0, 0.5])]).unwrap();
        assert_eq!(a, b);
    }
}
