//! Minimal CPU network engine: im2col convolutions on top of `matrixmultiply`, with
//! hand-written backward passes and an Adam optimizer.

mod layers;
mod scalar;
mod tensor;

pub use layers::{
    col2im, conv_out, conv_transpose_out, im2col, BatchNorm2d, Conv2d, ConvGeom, ConvTranspose2d,
    Layer, LeakyRelu, Linear, Param, ResidualBlock,
};
pub use scalar::{matmul, Scalar};
pub use tensor::Tensor;

/// A chain of layers. Training-mode forward passes record the input shape of every
/// layer so that [`Sequential::backward`] can run the chain in reverse.
#[derive(Debug, Clone)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Sequential {
            layers,
            shapes: Vec::new(),
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.infer(&h);
        }
        h
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.shapes.clear();
        let mut h = x.clone();
        for l in &mut self.layers {
            self.shapes.push(h.shape.clone());
            h = l.forward(&h);
        }
        h
    }

    /// Accumulates parameter gradients; returns the input gradient if requested.
    pub fn backward(&mut self, dy: &Tensor<T>, need_input_grad: bool) -> Option<Tensor<T>> {
        assert_eq!(self.shapes.len(), self.layers.len(), "backward without forward");
        let mut g = dy.clone();
        let n = self.layers.len();
        for i in (0..n).rev() {
            let need = i > 0 || need_input_grad;
            match self.layers[i].backward(&g, &self.shapes[i], need) {
                Some(next) => g = next,
                None => {
                    debug_assert!(!need);
                    self.shapes.clear();
                    return None;
                }
            }
        }
        self.shapes.clear();
        Some(g)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are matched to parameters by position,
/// so the same parameter ordering must be passed to every [`Adam::step`].
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param<T>]) {
        if self.m.is_empty() {
            for p in params.iter() {
                let n = if p.trainable { p.value.len() } else { 0 };
                self.m.push(vec![T::zero(); n]);
                self.v.push(vec![T::zero(); n]);
            }
        }
        assert_eq!(self.m.len(), params.len(), "parameter set changed");
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let step_size = T::lit(c.learning_rate / bc1);
        let inv_bc2_sqrt = T::lit(1.0 / bc2.sqrt());
        let eps = T::lit(c.eps);
        for (idx, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                let denom = v[i].sqrt() * inv_bc2_sqrt + eps;
                p.value[i] -= step_size * m[i] / denom;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        use rand::Rng;
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Direct nested-loop convolution.
    fn naive_conv(x: &Tensor<f64>, c: &Conv2d<f64>) -> Tensor<f64> {
        let (n, cin, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let (k, s, p) = (c.kernel, c.stride, c.pad);
        let oh = conv_out(h, k, s, p);
        let ow = conv_out(w, k, s, p);
        let mut y = Tensor::zeros(&[n, c.out_channels, oh, ow]);
        for b in 0..n {
            for co in 0..c.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = c.bias.value[co];
                        for ci in 0..cin {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * s + ki) as isize - p as isize;
                                    let ix = (ox * s + kj) as isize - p as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += c.weight.value[((co * cin + ci) * k + ki) * k + kj]
                                        * x.data[((b * cin + ci) * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                        y.data[((b * c.out_channels + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        y
    }

    /// Scatter definition of the transposed convolution.
    fn naive_conv_t(x: &Tensor<f64>, c: &ConvTranspose2d<f64>) -> Tensor<f64> {
        let (n, cin, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let (k, s, p) = (c.kernel, c.stride, c.pad);
        let oh = conv_transpose_out(h, k, s, p);
        let ow = conv_transpose_out(w, k, s, p);
        let cout = c.out_channels;
        let mut y = Tensor::zeros(&[n, cout, oh, ow]);
        for b in 0..n {
            for co in 0..cout {
                for v in &mut y.data[((b * cout + co) * oh * ow)..((b * cout + co + 1) * oh * ow)] {
                    *v = c.bias.value[co];
                }
            }
            for ci in 0..cin {
                for iy in 0..h {
                    for ix in 0..w {
                        let xv = x.data[((b * cin + ci) * h + iy) * w + ix];
                        for co in 0..cout {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let oy = (iy * s + ki) as isize - p as isize;
                                    let ox = (ix * s + kj) as isize - p as isize;
                                    if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                        continue;
                                    }
                                    y.data[((b * cout + co) * oh + oy as usize) * ow + ox as usize] +=
                                        xv * c.weight.value[((ci * cout + co) * k + ki) * k + kj];
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::<f64>::new("c", 3, 4, 3, 2, 1, &mut rng);
        let x = rand_tensor(&[2, 3, 9, 9], &mut rng);
        let a = conv.infer(&x);
        let b = naive_conv(&x, &conv);
        assert_eq!(a.shape, vec![2, 4, 5, 5]);
        for (p, q) in a.data.iter().zip(&b.data) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_transpose_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in [3, 4] {
            let conv = ConvTranspose2d::<f64>::new("t", 3, 2, k, 2, 1, &mut rng);
            let x = rand_tensor(&[2, 3, 5, 5], &mut rng);
            let a = conv.infer(&x);
            let b = naive_conv_t(&x, &conv);
            assert_eq!(a.shape, b.shape);
            for (p, q) in a.data.iter().zip(&b.data) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    /// Sum of `y * r` for a fixed random `r` gives a scalar whose gradient w.r.t. `y`
    /// is `r`, which is fed to backward and compared with central differences.
    fn check_layer_grads(mut layer: Layer<f64>, in_shape: &[usize], seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(in_shape, &mut rng);
        let y = layer.forward(&x);
        let r = rand_tensor(&y.shape, &mut rng);
        for p in layer.params_mut() {
            p.zero_grad();
        }
        let dx = layer.backward(&r, in_shape, true).unwrap();
        let objective = |l: &mut Layer<f64>, x: &Tensor<f64>| -> f64 {
            let y = l.forward(x);
            y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (objective(&mut layer, &xp) - objective(&mut layer, &xm)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-6 * (1.0 + fd.abs()), "dx[{i}]: {fd} vs {}", dx.data[i]);
        }
        let nparams = layer.params().len();
        for pi in 0..nparams {
            if !layer.params()[pi].trainable {
                continue;
            }
            let len = layer.params()[pi].value.len();
            for j in (0..len).step_by(5) {
                let analytic = layer.params()[pi].grad[j];
                let orig = layer.params()[pi].value[j];
                layer.params_mut()[pi].value[j] = orig + h;
                let fp = objective(&mut layer, &x);
                layer.params_mut()[pi].value[j] = orig - h;
                let fm = objective(&mut layer, &x);
                layer.params_mut()[pi].value[j] = orig;
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - analytic).abs() < 1e-6 * (1.0 + fd.abs()), "param {pi}[{j}]: {fd} vs {analytic}");
            }
        }
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check_layer_grads(Layer::Conv(Conv2d::new("c", 2, 3, 3, 2, 1, &mut rng)), &[2, 2, 7, 7], 10);
        check_layer_grads(
            Layer::ConvTranspose(ConvTranspose2d::new("t", 2, 3, 4, 2, 1, &mut rng)),
            &[2, 2, 4, 4],
            11,
        );
        check_layer_grads(Layer::BatchNorm(BatchNorm2d::new("b", 3)), &[2, 3, 4, 4], 12);
        check_layer_grads(Layer::Linear(Linear::new("l", 6, 4, &mut rng)), &[3, 6], 13);
        check_layer_grads(Layer::Residual(ResidualBlock::new("r", 2, 0.2, &mut rng)), &[2, 2, 5, 5], 14);
        check_layer_grads(Layer::LeakyRelu(LeakyRelu::new(0.2)), &[2, 9], 15);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = Param::<f64> {
            name: "w".into(),
            shape: vec![2],
            value: vec![1.0, -1.0],
            grad: vec![0.5, -3.0],
            trainable: true,
        };
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        adam.step(&mut [&mut p]);
        assert!((p.value[0] - 0.9).abs() < 1e-6);
        assert!((p.value[1] + 0.9).abs() < 1e-6);
    }
}
