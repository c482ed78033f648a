//! Layers with explicit forward caches and hand-written backward passes.

use rand::Rng;

use super::scalar::matmul;
use super::{Scalar, Tensor};

/// A named weight with its accumulated gradient. Non-trainable entries (batch-norm
/// running statistics) are serialized but never touched by the optimizer.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    fn new(name: String, shape: &[usize], value: Vec<T>, trainable: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = if trainable {
            vec![T::zero(); value.len()]
        } else {
            Vec::new()
        };
        Param {
            name,
            shape: shape.to_vec(),
            value,
            grad,
            trainable,
        }
    }

    fn uniform(name: String, shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let value = (0..n)
            .map(|_| T::lit(rng.random_range(-bound..bound)))
            .collect();
        Param::new(name, shape, value, true)
    }

    fn filled(name: String, shape: &[usize], v: f64, trainable: bool) -> Self {
        let n = shape.iter().product();
        Param::new(name, shape, vec![T::lit(v); n], trainable)
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Spatial geometry of a convolution from an input plane `c x h x w` to an output
/// plane `out_h x out_w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, h: usize, w: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        ConvGeom {
            channels,
            h,
            w,
            kernel,
            stride,
            pad,
            out_h: conv_out(h, kernel, stride, pad),
            out_w: conv_out(w, kernel, stride, pad),
        }
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// `floor((n + 2p - k) / s) + 1`
pub fn conv_out(n: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - kernel) / stride + 1
}

/// `(n - 1) s - 2p + k`
pub fn conv_transpose_out(n: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (n - 1) * stride + kernel - 2 * pad
}

pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ncols = g.cols();
    debug_assert_eq!(cols.len(), g.rows() * ncols);
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let seg = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        seg.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in seg.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds columns back into the (pre-zeroed) image.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let ncols = g.cols();
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let seg = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, v) in seg.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += *v;
                        }
                    }
                }
            }
        }
    }
}

fn add_channel_bias<T: Scalar>(y: &mut [T], bias: &[T], plane: usize) {
    for (c, b) in bias.iter().enumerate() {
        y[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += *b);
    }
}

fn accumulate_channel_bias_grad<T: Scalar>(dy: &[T], grad: &mut [T], plane: usize) {
    for (c, g) in grad.iter_mut().enumerate() {
        *g += dy[c * plane..(c + 1) * plane].iter().copied().sum::<T>();
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<(Vec<usize>, Vec<T>)>,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Conv2d {
            weight: Param::uniform(
                format!("{name}.weight"),
                &[out_channels, in_channels, kernel, kernel],
                bound,
                rng,
            ),
            bias: Param::uniform(format!("{name}.bias"), &[out_channels], bound, rng),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    fn geom(&self, x: &Tensor<T>) -> ConvGeom {
        assert_eq!(x.shape.len(), 4);
        assert_eq!(x.shape[1], self.in_channels, "conv input channels");
        ConvGeom::new(self.in_channels, x.shape[2], x.shape[3], self.kernel, self.stride, self.pad)
    }

    fn run(&self, x: &Tensor<T>, keep: bool) -> (Tensor<T>, Option<Vec<T>>) {
        let g = self.geom(x);
        let n = x.batch();
        let (rows, ncols) = (g.rows(), g.cols());
        let mut y = Tensor::zeros(&[n, self.out_channels, g.out_h, g.out_w]);
        let mut all_cols = if keep {
            vec![T::zero(); n * rows * ncols]
        } else {
            Vec::new()
        };
        let mut scratch = if keep {
            Vec::new()
        } else {
            vec![T::zero(); rows * ncols]
        };
        let out_len = self.out_channels * ncols;
        for i in 0..n {
            let cols = if keep {
                &mut all_cols[i * rows * ncols..(i + 1) * rows * ncols]
            } else {
                &mut scratch[..]
            };
            im2col(x.item(i), &g, cols);
            let yi = &mut y.data[i * out_len..(i + 1) * out_len];
            matmul(self.out_channels, rows, ncols, &self.weight.value, false, cols, false, yi, false);
            add_channel_bias(yi, &self.bias.value, ncols);
        }
        (y, keep.then_some(all_cols))
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let (y, cols) = self.run(x, true);
        self.cache = Some((x.shape.clone(), cols.unwrap()));
        y
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        self.run(x, false).0
    }

    pub fn backward(&mut self, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let (in_shape, cols) = self.cache.take().expect("conv backward without forward");
        let g = ConvGeom::new(self.in_channels, in_shape[2], in_shape[3], self.kernel, self.stride, self.pad);
        let n = in_shape[0];
        let (rows, ncols) = (g.rows(), g.cols());
        let out_len = self.out_channels * ncols;
        let mut dx = need_dx.then(|| Tensor::zeros(&in_shape));
        let mut dcols = vec![T::zero(); if need_dx { rows * ncols } else { 0 }];
        let in_len = in_shape[1..].iter().product::<usize>();
        for i in 0..n {
            let dyi = &dy.data[i * out_len..(i + 1) * out_len];
            let ci = &cols[i * rows * ncols..(i + 1) * rows * ncols];
            matmul(self.out_channels, ncols, rows, dyi, false, ci, true, &mut self.weight.grad, true);
            accumulate_channel_bias_grad(dyi, &mut self.bias.grad, ncols);
            if let Some(dx) = dx.as_mut() {
                matmul(rows, self.out_channels, ncols, &self.weight.value, true, dyi, false, &mut dcols, false);
                col2im(&dcols, &g, &mut dx.data[i * in_len..(i + 1) * in_len]);
            }
        }
        dx
    }

    fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }
}

/// Transposed convolution with PyTorch weight layout `[in, out, k, k]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> ConvTranspose2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = out_channels * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        ConvTranspose2d {
            weight: Param::uniform(
                format!("{name}.weight"),
                &[in_channels, out_channels, kernel, kernel],
                bound,
                rng,
            ),
            bias: Param::uniform(format!("{name}.bias"), &[out_channels], bound, rng),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    /// Geometry of the equivalent forward convolution (output plane -> input plane).
    fn geom(&self, h: usize, w: usize) -> ConvGeom {
        let oh = conv_transpose_out(h, self.kernel, self.stride, self.pad);
        let ow = conv_transpose_out(w, self.kernel, self.stride, self.pad);
        let g = ConvGeom::new(self.out_channels, oh, ow, self.kernel, self.stride, self.pad);
        debug_assert_eq!((g.out_h, g.out_w), (h, w));
        g
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.shape[1], self.in_channels, "transposed conv input channels");
        let (h, w) = (x.shape[2], x.shape[3]);
        let g = self.geom(h, w);
        let n = x.batch();
        let rows = g.rows();
        let hw = h * w;
        let out_len = self.out_channels * g.h * g.w;
        let mut y = Tensor::zeros(&[n, self.out_channels, g.h, g.w]);
        let mut cols = vec![T::zero(); rows * hw];
        for i in 0..n {
            matmul(rows, self.in_channels, hw, &self.weight.value, true, x.item(i), false, &mut cols, false);
            let yi = &mut y.data[i * out_len..(i + 1) * out_len];
            col2im(&cols, &g, yi);
            add_channel_bias(yi, &self.bias.value, g.h * g.w);
        }
        y
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.infer(x);
        self.cache = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let x = self.cache.take().expect("transposed conv backward without forward");
        let (h, w) = (x.shape[2], x.shape[3]);
        let g = self.geom(h, w);
        let rows = g.rows();
        let hw = h * w;
        let out_len = self.out_channels * g.h * g.w;
        let mut dcols = vec![T::zero(); rows * hw];
        let mut dx = need_dx.then(|| Tensor::zeros(&x.shape));
        let in_len = self.in_channels * hw;
        for i in 0..x.batch() {
            let dyi = &dy.data[i * out_len..(i + 1) * out_len];
            accumulate_channel_bias_grad(dyi, &mut self.bias.grad, g.h * g.w);
            im2col(dyi, &g, &mut dcols);
            matmul(self.in_channels, hw, rows, x.item(i), false, &dcols, true, &mut self.weight.grad, true);
            if let Some(dx) = dx.as_mut() {
                matmul(
                    self.in_channels,
                    rows,
                    hw,
                    &self.weight.value,
                    false,
                    &dcols,
                    false,
                    &mut dx.data[i * in_len..(i + 1) * in_len],
                    false,
                );
            }
        }
        dx
    }

    fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }
}

/// Per-channel batch normalization over `(N, H, W)`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<(Tensor<T>, Vec<T>)>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::filled(format!("{name}.weight"), &[channels], 1.0, true),
            beta: Param::filled(format!("{name}.bias"), &[channels], 0.0, true),
            running_mean: Param::filled(format!("{name}.running_mean"), &[channels], 0.0, false),
            running_var: Param::filled(format!("{name}.running_var"), &[channels], 1.0, false),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, plane) = (x.shape[0], x.shape[1], x.shape[2] * x.shape[3]);
        let eps = T::lit(self.eps);
        let mut y = x.clone();
        for i in 0..n {
            for ch in 0..c {
                let scale = self.gamma.value[ch] / (self.running_var.value[ch] + eps).sqrt();
                let shift = self.beta.value[ch] - self.running_mean.value[ch] * scale;
                let off = (i * c + ch) * plane;
                y.data[off..off + plane]
                    .iter_mut()
                    .for_each(|v| *v = *v * scale + shift);
            }
        }
        y
    }

    /// Normalizes with batch statistics and updates the running estimates.
    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, plane) = (x.shape[0], x.shape[1], x.shape[2] * x.shape[3]);
        let m = n * plane;
        let mut xhat = x.clone();
        let mut inv_std = vec![T::zero(); c];
        let mut y = x.clone();
        let mom = T::lit(self.momentum);
        for ch in 0..c {
            let mut sum = T::zero();
            for i in 0..n {
                let off = (i * c + ch) * plane;
                sum += x.data[off..off + plane].iter().copied().sum::<T>();
            }
            let mean = sum / T::lit(m as f64);
            let mut sq = T::zero();
            for i in 0..n {
                let off = (i * c + ch) * plane;
                sq += x.data[off..off + plane]
                    .iter()
                    .map(|v| (*v - mean) * (*v - mean))
                    .sum::<T>();
            }
            let var = sq / T::lit(m as f64);
            let istd = T::one() / (var + T::lit(self.eps)).sqrt();
            inv_std[ch] = istd;
            for i in 0..n {
                let off = (i * c + ch) * plane;
                for j in off..off + plane {
                    let h = (x.data[j] - mean) * istd;
                    xhat.data[j] = h;
                    y.data[j] = self.gamma.value[ch] * h + self.beta.value[ch];
                }
            }
            let unbiased = if m > 1 {
                sq / T::lit((m - 1) as f64)
            } else {
                var
            };
            let rm = &mut self.running_mean.value[ch];
            *rm = (T::one() - mom) * *rm + mom * mean;
            let rv = &mut self.running_var.value[ch];
            *rv = (T::one() - mom) * *rv + mom * unbiased;
        }
        self.cache = Some((xhat, inv_std));
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let (xhat, inv_std) = self.cache.take().expect("batch norm backward without forward");
        let (n, c, plane) = (dy.shape[0], dy.shape[1], dy.shape[2] * dy.shape[3]);
        let m = T::lit((n * plane) as f64);
        let mut dx = Tensor::zeros(&dy.shape);
        for ch in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for i in 0..n {
                let off = (i * c + ch) * plane;
                for j in off..off + plane {
                    sum_dy += dy.data[j];
                    sum_dy_xhat += dy.data[j] * xhat.data[j];
                }
            }
            self.gamma.grad[ch] += sum_dy_xhat;
            self.beta.grad[ch] += sum_dy;
            let k = self.gamma.value[ch] * inv_std[ch] / m;
            for i in 0..n {
                let off = (i * c + ch) * plane;
                for j in off..off + plane {
                    dx.data[j] = k * (m * dy.data[j] - sum_dy - xhat.data[j] * sum_dy_xhat);
                }
            }
        }
        dx
    }

    fn params_mut(&mut self) -> [&mut Param<T>; 4] {
        [
            &mut self.gamma,
            &mut self.beta,
            &mut self.running_mean,
            &mut self.running_var,
        ]
    }

    fn params(&self) -> [&Param<T>; 4] {
        [&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }
}

#[derive(Debug, Clone)]
pub struct LeakyRelu<T> {
    pub slope: f64,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> LeakyRelu<T> {
    pub fn new(slope: f64) -> Self {
        LeakyRelu { slope, cache: None }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let s = T::lit(self.slope);
        let mut y = x.clone();
        y.data
            .iter_mut()
            .for_each(|v| {
                if *v < T::zero() {
                    *v *= s
                }
            });
        y
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.infer(x);
        self.cache = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.cache.take().expect("leaky relu backward without forward");
        let s = T::lit(self.slope);
        let mut dx = dy.clone();
        for (d, xv) in dx.data.iter_mut().zip(&x.data) {
            if *xv < T::zero() {
                *d *= s;
            }
        }
        dx
    }
}

/// `y = x W^T + b` with `W` stored `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_features: usize,
    pub out_features: usize,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: &str, in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        Linear {
            weight: Param::uniform(format!("{name}.weight"), &[out_features, in_features], bound, rng),
            bias: Param::uniform(format!("{name}.bias"), &[out_features], bound, rng),
            in_features,
            out_features,
            cache: None,
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let n = x.batch();
        assert_eq!(x.item_len(), self.in_features, "linear input features");
        let mut y = Tensor::zeros(&[n, self.out_features]);
        for i in 0..n {
            y.data[i * self.out_features..(i + 1) * self.out_features]
                .copy_from_slice(&self.bias.value);
        }
        matmul(n, self.in_features, self.out_features, &x.data, false, &self.weight.value, true, &mut y.data, true);
        y
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = self.infer(x);
        self.cache = Some(x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let x = self.cache.take().expect("linear backward without forward");
        let n = x.batch();
        matmul(self.out_features, n, self.in_features, &dy.data, true, &x.data, false, &mut self.weight.grad, true);
        for i in 0..n {
            for (g, d) in self
                .bias
                .grad
                .iter_mut()
                .zip(&dy.data[i * self.out_features..(i + 1) * self.out_features])
            {
                *g += *d;
            }
        }
        need_dx.then(|| {
            let mut dx = Tensor::zeros(&x.shape);
            matmul(n, self.out_features, self.in_features, &dy.data, false, &self.weight.value, false, &mut dx.data, false);
            dx
        })
    }

    fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }
}

/// `leaky(x + conv2(leaky(conv1(x))))`, both convolutions 3x3, stride 1, padding 1.
#[derive(Debug, Clone)]
pub struct ResidualBlock<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    act1: LeakyRelu<T>,
    act_out: LeakyRelu<T>,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new(name: &str, channels: usize, slope: f64, rng: &mut impl Rng) -> Self {
        ResidualBlock {
            conv1: Conv2d::new(&format!("{name}.conv1"), channels, channels, 3, 1, 1, rng),
            conv2: Conv2d::new(&format!("{name}.conv2"), channels, channels, 3, 1, 1, rng),
            act1: LeakyRelu::new(slope),
            act_out: LeakyRelu::new(slope),
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut s = self.conv2.infer(&self.act1.infer(&self.conv1.infer(x)));
        s.data.iter_mut().zip(&x.data).for_each(|(a, b)| *a += *b);
        self.act_out.infer(&s)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let h = self.conv1.forward(x);
        let a = self.act1.forward(&h);
        let mut s = self.conv2.forward(&a);
        s.data.iter_mut().zip(&x.data).for_each(|(a, b)| *a += *b);
        self.act_out.forward(&s)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let ds = self.act_out.backward(dy);
        let da = self.conv2.backward(&ds, true).expect("dx requested");
        let dh = self.act1.backward(&da);
        let mut dx = self.conv1.backward(&dh, true).expect("dx requested");
        dx.data.iter_mut().zip(&ds.data).for_each(|(a, b)| *a += *b);
        dx
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v: Vec<&mut Param<T>> = self.conv1.params_mut().into_iter().collect();
        v.extend(self.conv2.params_mut());
        v
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v: Vec<&Param<T>> = self.conv1.params().into_iter().collect();
        v.extend(self.conv2.params());
        v
    }
}

#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    ConvTranspose(ConvTranspose2d<T>),
    BatchNorm(BatchNorm2d<T>),
    LeakyRelu(LeakyRelu<T>),
    Residual(ResidualBlock<T>),
    Linear(Linear<T>),
    /// `[N, C, H, W] -> [N, C*H*W]`
    Flatten,
    /// `[N, C*H*W] -> [N, C, H, W]`
    Unflatten([usize; 3]),
}

impl<T: Scalar> Layer<T> {
    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            Layer::Conv(l) => l.infer(x),
            Layer::ConvTranspose(l) => l.infer(x),
            Layer::BatchNorm(l) => l.infer(x),
            Layer::LeakyRelu(l) => l.infer(x),
            Layer::Residual(l) => l.infer(x),
            Layer::Linear(l) => l.infer(x),
            Layer::Flatten => x.clone().reshape(&[x.batch(), x.item_len()]),
            Layer::Unflatten(s) => x.clone().reshape(&[x.batch(), s[0], s[1], s[2]]),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            Layer::Conv(l) => l.forward(x),
            Layer::ConvTranspose(l) => l.forward(x),
            Layer::BatchNorm(l) => l.forward(x),
            Layer::LeakyRelu(l) => l.forward(x),
            Layer::Residual(l) => l.forward(x),
            Layer::Linear(l) => l.forward(x),
            Layer::Flatten | Layer::Unflatten(_) => self.infer(x),
        }
    }

    /// Returns the input gradient when `need_dx` is set; `in_shape` is the shape the
    /// layer saw on the forward pass.
    pub fn backward(&mut self, dy: &Tensor<T>, in_shape: &[usize], need_dx: bool) -> Option<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.backward(dy, need_dx),
            Layer::ConvTranspose(l) => l.backward(dy, need_dx),
            Layer::BatchNorm(l) => Some(l.backward(dy)),
            Layer::LeakyRelu(l) => Some(l.backward(dy)),
            Layer::Residual(l) => Some(l.backward(dy)),
            Layer::Linear(l) => l.backward(dy, need_dx),
            Layer::Flatten | Layer::Unflatten(_) => Some(dy.clone().reshape(in_shape)),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Layer::Conv(l) => l.params_mut().into_iter().collect(),
            Layer::ConvTranspose(l) => l.params_mut().into_iter().collect(),
            Layer::BatchNorm(l) => l.params_mut().into_iter().collect(),
            Layer::Residual(l) => l.params_mut(),
            Layer::Linear(l) => l.params_mut().into_iter().collect(),
            _ => Vec::new(),
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        match self {
            Layer::Conv(l) => l.params().into_iter().collect(),
            Layer::ConvTranspose(l) => l.params().into_iter().collect(),
            Layer::BatchNorm(l) => l.params().into_iter().collect(),
            Layer::Residual(l) => l.params(),
            Layer::Linear(l) => l.params().into_iter().collect(),
            _ => Vec::new(),
        }
    }
}
